//! Text encoders producing raw unit-norm embeddings.

use std::io::Write;
use std::process::{Command, Stdio};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_RAW_DIM: usize = 256;

/// Maps a batch of texts to raw embedding vectors of a fixed width.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Array1<f64>>>;
}

/// Deterministic encoder: every `(position, word)` pair seeds a Gaussian vector
/// through a stable hash, and a text embeds as the normalized sum over its words.
///
/// Single-word labels therefore get independent random directions, while
/// templated sentences share structure with every sentence that places the same
/// word at the same position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    pub dim: usize,
}

impl Default for HashEncoder {
    fn default() -> Self {
        HashEncoder { dim: DEFAULT_RAW_DIM }
    }
}

impl HashEncoder {
    fn word_vector(&self, position: usize, word: &str) -> Array1<f64> {
        let mut hasher = Sha256::new();
        hasher.update((position as u64).to_le_bytes());
        hasher.update(word.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        Array1::from_iter((0..self.dim).map(|_| StandardNormal.sample(&mut rng)))
    }

    pub fn encode(&self, text: &str) -> Array1<f64> {
        let mut acc = Array1::<f64>::zeros(self.dim);
        for (k, word) in words(text).enumerate() {
            acc += &self.word_vector(k, word);
        }
        acc
    }
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c == ',' || c.is_whitespace()).filter(|w| !w.is_empty())
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Array1<f64>>> {
        Ok(texts.iter().map(|t| self.encode(t)).collect())
    }
}

/// Runs an external program that reads one text per stdin line and prints one
/// whitespace-separated vector per stdout line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandEncoder {
    pub program: String,
    pub args: Vec<String>,
    pub dim: usize,
}

impl TextEncoder for CommandEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Array1<f64>>> {
        if texts.iter().any(|t| t.contains('\n')) {
            return Err(Error::invalid("texts sent to an encoder process must be single-line"));
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(&self.program, e))?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            let mut payload = texts.join("\n");
            payload.push('\n');
            stdin
                .write_all(payload.as_bytes())
                .map_err(|e| Error::io(&self.program, e))?;
        }
        let output = child.wait_with_output().map_err(|e| Error::io(&self.program, e))?;
        if !output.status.success() {
            return Err(Error::invalid(format!(
                "encoder {} exited with {}",
                self.program, output.status
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let rows: Vec<Array1<f64>> = stdout
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| Error::invalid(e.to_string())))
                    .collect::<Result<Vec<f64>>>()
                    .map(Array1::from)
            })
            .collect::<Result<_>>()?;
        if rows.len() != texts.len() || rows.iter().any(|r| r.len() != self.dim) {
            return Err(Error::invalid(format!(
                "encoder returned {} rows for {} texts (expected width {})",
                rows.len(),
                texts.len(),
                self.dim
            )));
        }
        Ok(rows)
    }
}

/// Serializable encoder choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    Hash { dim: usize },
    Command { program: String, args: Vec<String>, dim: usize },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Hash { dim: DEFAULT_RAW_DIM }
    }
}

impl EncoderSpec {
    pub fn build(&self) -> Box<dyn TextEncoder + Send + Sync> {
        match self {
            EncoderSpec::Hash { dim } => Box::new(HashEncoder { dim: *dim }),
            EncoderSpec::Command { program, args, dim } => Box::new(CommandEncoder {
                program: program.clone(),
                args: args.clone(),
                dim: *dim,
            }),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderSpec::Hash { dim } | EncoderSpec::Command { dim, .. } => *dim,
        }
    }
}

/// Embeds texts and scales each vector to unit length.
pub fn embed_texts(encoder: &dyn TextEncoder, texts: &[String]) -> Result<Vec<Array1<f64>>> {
    if let Some(t) = texts.iter().find(|t| t.trim().is_empty()) {
        return Err(Error::invalid(format!("cannot embed empty text {t:?}")));
    }
    let raw = encoder.encode_batch(texts)?;
    raw.into_iter()
        .zip(texts)
        .map(|(v, t)| {
            let norm = v.dot(&v).sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::invalid(format!("encoder produced a degenerate vector for {t:?}")));
            }
            Ok(v / norm)
        })
        .collect()
}

/// Unit-norm embedding of a single label.
pub fn embed_label(encoder: &dyn TextEncoder, label: &str) -> Result<Array1<f64>> {
    Ok(embed_texts(encoder, &[label.to_string()])?.remove(0))
}
