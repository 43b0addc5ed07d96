//! Label database and nearest-neighbor decoding of frame embeddings.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::encoder::{embed_texts, TextEncoder};
use super::pca::PcaModel;
use crate::data::FrameLabelTrack;
use crate::error::{Error, Result};

/// Compressed embeddings of a closed label vocabulary, sorted by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDatabase {
    labels: Vec<String>,
    vectors: Array2<f64>,
    /// Smallest distance between two distinct entries (`inf` for one entry).
    pub min_distance: f64,
}

impl EmbeddingDatabase {
    /// Builds from explicit `(label, vector)` pairs.
    pub fn from_entries(mut entries: Vec<(String, Array1<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("embedding database needs at least one label"));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!("duplicate label {:?}", w[0].0)));
        }
        let d = entries[0].1.len();
        if entries.iter().any(|(_, v)| v.len() != d) {
            return Err(Error::invalid("database vectors differ in width"));
        }
        let mut vectors = Array2::<f64>::zeros((entries.len(), d));
        for (i, (_, v)) in entries.iter().enumerate() {
            vectors.row_mut(i).assign(v);
        }
        let labels: Vec<String> = entries.into_iter().map(|(l, _)| l).collect();
        let mut min_distance = f64::INFINITY;
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                let diff = &vectors.row(i) - &vectors.row(j);
                min_distance = min_distance.min(diff.dot(&diff).sqrt());
            }
        }
        Ok(EmbeddingDatabase {
            labels,
            vectors,
            min_distance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn get(&self, label: &str) -> Option<ArrayView1<'_, f64>> {
        self.labels
            .binary_search_by(|l| l.as_str().cmp(label))
            .ok()
            .map(|i| self.vectors.row(i))
    }

    /// The `k` closest labels with their Euclidean distances, nearest first.
    /// Equal distances are ordered by label.
    pub fn knn(&self, query: ArrayView1<f64>, k: usize) -> Result<Vec<(&str, f64)>> {
        if query.len() != self.dim() {
            return Err(Error::invalid(format!(
                "query has {} dims, database has {}",
                query.len(),
                self.dim()
            )));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("query embedding is not finite"));
        }
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let d2: f64 = row.iter().zip(query.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (i, d2)
            })
            .collect();
        // labels are sorted, so a stable sort on distance breaks ties lexicographically
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"));
        Ok(scored
            .into_iter()
            .take(k.max(1))
            .map(|(i, d2)| (self.labels[i].as_str(), d2.sqrt()))
            .collect())
    }

    /// Stores entries as `(label, vector)` pairs for inspection.
    pub fn export(&self) -> Vec<(String, Vec<f64>)> {
        self.labels
            .iter()
            .zip(self.vectors.rows())
            .map(|(l, v)| (l.clone(), v.to_vec()))
            .collect()
    }
}

/// `label -> project(embed_label(label))` over a vocabulary.
pub fn build_database(
    vocabulary: &[String],
    encoder: &dyn TextEncoder,
    pca: &PcaModel,
) -> Result<EmbeddingDatabase> {
    if vocabulary.is_empty() {
        return Err(Error::invalid("vocabulary must not be empty"));
    }
    let mut sorted = vocabulary.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate label {:?}", w[0])));
    }
    let raw = embed_texts(encoder, vocabulary)?;
    let entries = vocabulary
        .iter()
        .zip(raw)
        .map(|(l, v)| Ok((l.clone(), pca.project(v.view())?)))
        .collect::<Result<Vec<_>>>()?;
    let db = EmbeddingDatabase::from_entries(entries)?;
    log::info!(
        "embedding database: {} labels, min pairwise distance {:.4}",
        db.len(),
        db.min_distance
    );
    Ok(db)
}

/// Nearest database label.
pub fn knn_decode(vec: ArrayView1<f64>, db: &EmbeddingDatabase) -> Result<String> {
    Ok(db.knn(vec, 1)?[0].0.to_string())
}

/// Repeats each segment's database vector over its frames.
pub fn track_to_embeddings(
    track: &FrameLabelTrack,
    n_frames: usize,
    db: &EmbeddingDatabase,
) -> Result<Array2<f64>> {
    track.validate()?;
    if track.n_frames() != n_frames {
        return Err(Error::invalid(format!(
            "track covers {} frames, expected {n_frames}",
            track.n_frames()
        )));
    }
    let mut out = Array2::<f64>::zeros((n_frames, db.dim()));
    for seg in &track.segments {
        let v = db
            .get(&seg.label)
            .ok_or_else(|| Error::invalid(format!("label {:?} is not in the database", seg.label)))?;
        for i in seg.start..seg.end {
            out.row_mut(i).assign(&v);
        }
    }
    Ok(out)
}

/// Decodes every row by nearest neighbor, optionally majority-filters the
/// labels over an odd window, then run-length merges.
pub fn embeddings_to_track(
    seq: &Array2<f64>,
    db: &EmbeddingDatabase,
    smoothing_window: Option<usize>,
) -> Result<FrameLabelTrack> {
    let mut labels = seq
        .rows()
        .into_iter()
        .map(|row| knn_decode(row, db))
        .collect::<Result<Vec<String>>>()?;
    if let Some(w) = smoothing_window.filter(|&w| w > 1) {
        labels = majority_filter(&labels, w);
    }
    FrameLabelTrack::from_frame_labels(&labels)
}

fn majority_filter(labels: &[String], window: usize) -> Vec<String> {
    let half = window / 2;
    (0..labels.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(labels.len());
            let mut counts: Vec<(&str, usize)> = Vec::new();
            for l in &labels[lo..hi] {
                match counts.iter_mut().find(|(k, _)| *k == l.as_str()) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((l.as_str(), 1)),
                }
            }
            let best = counts.iter().map(|(_, c)| *c).max().unwrap_or(0);
            // keep the centre label when it ties for the majority
            if counts.iter().any(|(k, c)| *k == labels[i].as_str() && *c == best) {
                labels[i].clone()
            } else {
                counts
                    .iter()
                    .filter(|(_, c)| *c == best)
                    .map(|(k, _)| *k)
                    .min()
                    .unwrap_or(labels[i].as_str())
                    .to_string()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encoder::{embed_label, HashEncoder};
    use crate::codec::pca::fit_pca;
    use crate::data::{Action, Segment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn action_db() -> EmbeddingDatabase {
        let enc = HashEncoder::default();
        let vocab = Action::vocabulary();
        let mut fit = Vec::new();
        for (i, l) in vocab.iter().enumerate() {
            for _ in 0..(3 + i) {
                fit.push(embed_label(&enc, l).unwrap());
            }
        }
        let pca = fit_pca(&fit, 16).unwrap();
        build_database(&vocab, &enc, &pca).unwrap()
    }

    #[test]
    fn exact_match_decodes() {
        let db = action_db();
        assert_eq!(db.len(), 6);
        assert!(db.min_distance > 0.0 && db.min_distance.is_finite());
        for l in db.labels() {
            assert_eq!(&knn_decode(db.get(l).unwrap(), &db).unwrap(), l);
        }
    }

    #[test]
    fn min_distance_is_exhaustive_minimum() {
        let db = action_db();
        let mut best = f64::INFINITY;
        for a in db.labels() {
            for b in db.labels() {
                if a != b {
                    let d = &db.get(a).unwrap() - &db.get(b).unwrap();
                    best = best.min(d.dot(&d).sqrt());
                }
            }
        }
        assert_eq!(best, db.min_distance);
    }

    #[test]
    fn robust_inside_half_min_distance() {
        let db = action_db();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in db.labels() {
            for _ in 0..50 {
                let mut eta: Array1<f64> = Array1::from_iter((0..db.dim()).map(|_| StandardNormal.sample(&mut rng)));
                let n: f64 = eta.dot(&eta).sqrt();
                eta *= 0.49 * db.min_distance / n;
                let q = &db.get(l).unwrap() + &eta;
                assert_eq!(&knn_decode(q.view(), &db).unwrap(), l);
            }
        }
    }

    #[test]
    fn ties_go_to_smaller_label() {
        let db = EmbeddingDatabase::from_entries(vec![
            ("b".into(), Array1::from(vec![1.0, 0.0])),
            ("a".into(), Array1::from(vec![-1.0, 0.0])),
        ])
        .unwrap();
        assert_eq!(knn_decode(Array1::from(vec![0.0, 3.0]).view(), &db).unwrap(), "a");
        let two = db.knn(Array1::from(vec![0.9, 0.0]).view(), 2).unwrap();
        assert_eq!(two[0].0, "b");
        assert_eq!(two[1].0, "a");
    }

    #[test]
    fn single_entry_database() {
        let db = EmbeddingDatabase::from_entries(vec![("x".into(), Array1::zeros(3))]).unwrap();
        assert_eq!(db.len(), 1);
        assert!(db.min_distance.is_infinite());
    }

    #[test]
    fn duplicates_and_non_finite_rejected() {
        let enc = HashEncoder::default();
        let fit: Vec<_> = ["a", "b", "c"].iter().map(|l| embed_label(&enc, l).unwrap()).collect();
        let pca = fit_pca(&fit, 2).unwrap();
        assert!(build_database(&["a".into(), "a".into()], &enc, &pca).is_err());
        let db = build_database(&["a".into(), "b".into()], &enc, &pca).unwrap();
        assert!(knn_decode(Array1::from(vec![f64::NAN, 0.0]).view(), &db).is_err());
    }

    #[test]
    fn rebuild_is_identical() {
        assert_eq!(action_db(), action_db());
    }

    #[test]
    fn track_round_trip() {
        let db = action_db();
        let track = FrameLabelTrack::new(vec![
            Segment::new(0, 5, "zigzag"),
            Segment::new(5, 12, "stand"),
            Segment::new(12, 14, "circle-cw"),
        ])
        .unwrap();
        let emb = track_to_embeddings(&track, 14, &db).unwrap();
        assert_eq!(emb.row(3), db.get("zigzag").unwrap());
        assert_eq!(embeddings_to_track(&emb, &db, None).unwrap(), track);
        assert!(track_to_embeddings(&track, 15, &db).is_err());
        let missing = FrameLabelTrack::new(vec![Segment::new(0, 3, "fly")]).unwrap();
        assert!(track_to_embeddings(&missing, 3, &db).is_err());
    }

    #[test]
    fn single_segment_rows_identical() {
        let db = action_db();
        let track = FrameLabelTrack::new(vec![Segment::new(0, 9, "walk-back")]).unwrap();
        let emb = track_to_embeddings(&track, 9, &db).unwrap();
        for row in emb.rows() {
            assert_eq!(row, emb.row(0));
        }
    }

    #[test]
    fn noisy_decoding_agrees_with_clean_track() {
        // Monte-Carlo over the per-frame decoding rule; the noise vector has RMS
        // norm 0.3 * delta_min (per-coordinate std 0.3 * delta_min / sqrt(d_e))
        let db = action_db();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let track = FrameLabelTrack::new(vec![
            Segment::new(0, 10, "walk-fwd"),
            Segment::new(10, 25, "circle-ccw"),
            Segment::new(25, 32, "stand"),
        ])
        .unwrap();
        let clean = track_to_embeddings(&track, 32, &db).unwrap();
        let sigma = 0.3 * db.min_distance / (db.dim() as f64).sqrt();
        let (mut agree, mut total) = (0usize, 0usize);
        for _ in 0..1000 {
            let noisy = clean.mapv(|v| v + sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            let pred = embeddings_to_track(&noisy, &db, None).unwrap();
            for (a, b) in pred.frame_labels().iter().zip(track.frame_labels()) {
                agree += usize::from(*a == b);
                total += 1;
            }
        }
        let acc = agree as f64 / total as f64;
        assert!(acc >= 0.99, "agreement {acc}");
    }

    #[test]
    fn majority_filter_removes_flicker() {
        let labels: Vec<String> = ["a", "a", "b", "a", "a", "c", "c", "c"].iter().map(|s| s.to_string()).collect();
        let out = majority_filter(&labels, 5);
        assert_eq!(out[2], "a");
        assert_eq!(out[6], "c");
    }
}
