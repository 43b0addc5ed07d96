use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::codec::{build_database, embed_texts, embeddings_to_track, fit_pca, track_to_embeddings};
use crate::codec::{EmbeddingDatabase, EncoderSpec, PcaModel};
use crate::data::FrameLabelTrack;
use crate::error::{Error, Result};

/// Encoder, PCA and label database, plus the factor that brings compressed
/// label embeddings to unit per-element RMS before diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCodec {
    pub encoder: EncoderSpec,
    pub pca: PcaModel,
    pub database: EmbeddingDatabase,
    pub y_scale: f64,
}

impl TextCodec {
    /// Fits the PCA on one label embedding per training segment, builds the
    /// database over `vocabulary` and derives the scale from the frame-weighted
    /// second moment of the compressed embeddings.
    pub fn fit<'a, I>(encoder: EncoderSpec, vocabulary: &[String], tracks: I, d_e: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FrameLabelTrack>,
    {
        let enc = encoder.build();
        let raw = embed_texts(enc.as_ref(), vocabulary)?;
        let mut samples = Vec::new();
        let mut frames = vec![0usize; vocabulary.len()];
        for track in tracks {
            for seg in &track.segments {
                let k = vocabulary
                    .iter()
                    .position(|l| *l == seg.label)
                    .ok_or_else(|| Error::invalid(format!("label {:?} is outside the vocabulary", seg.label)))?;
                samples.push(raw[k].clone());
                frames[k] += seg.len();
            }
        }
        let pca = fit_pca(&samples, d_e)?;
        log::info!(
            "text PCA: {} segments, {} -> {} dims, explained variance ratio {:.4}",
            samples.len(),
            pca.raw_dim(),
            d_e,
            pca.explained_variance_ratio
        );
        let database = build_database(vocabulary, enc.as_ref(), &pca)?;
        let total: usize = frames.iter().sum();
        let second: f64 = vocabulary
            .iter()
            .zip(&frames)
            .map(|(l, &f)| {
                let v = database.get(l).expect("label in database");
                f as f64 * v.dot(&v)
            })
            .sum();
        let rms = (second / (total as f64 * d_e as f64)).sqrt();
        if !(rms.is_finite() && rms > 0.0) {
            return Err(Error::invalid("label embeddings collapse after compression"));
        }
        Ok(TextCodec {
            encoder,
            pca,
            database,
            y_scale: 1.0 / rms,
        })
    }

    pub fn dim(&self) -> usize {
        self.database.dim()
    }

    pub fn vocabulary(&self) -> &[String] {
        self.database.labels()
    }

    /// Scaled per-frame embeddings of a track.
    pub fn encode_track(&self, track: &FrameLabelTrack) -> Result<Array2<f64>> {
        Ok(track_to_embeddings(track, track.n_frames(), &self.database)? * self.y_scale)
    }

    pub fn decode_track(&self, y: &Array2<f64>, smoothing_window: Option<usize>) -> Result<FrameLabelTrack> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("frame-text prediction is not finite".into()));
        }
        embeddings_to_track(&(y / self.y_scale), &self.database, smoothing_window)
    }

    /// Raw unit-norm embeddings of global sentences.
    pub fn embed_sentences(&self, texts: &[String]) -> Result<Vec<Array1<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        embed_texts(self.encoder.build().as_ref(), texts)
    }
}
