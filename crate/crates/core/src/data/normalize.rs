use serde::{Deserialize, Serialize};

use super::types::MotionSequence;
use crate::error::{Error, Result};

/// Standard deviations are never allowed below this value.
pub const MIN_STD: f64 = 1e-8;

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::invalid("normalization mean/std lengths differ"));
        }
        if self.std.iter().any(|&s| !(s > MIN_STD * 0.999_999) || !s.is_finite()) {
            return Err(Error::invalid("normalization std must exceed 1e-8"));
        }
        Ok(())
    }
}

/// Fits mean and (population) standard deviation over all valid frames.
pub fn fit_normalization<'a, I>(motions: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a MotionSequence>,
{
    let mut count = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut sumsq: Vec<f64> = Vec::new();
    let mut motions_seen = Vec::new();
    for m in motions {
        if sum.is_empty() {
            sum = vec![0.0; m.dim()];
            sumsq = vec![0.0; m.dim()];
        } else if m.dim() != sum.len() {
            return Err(Error::invalid("motions in a dataset must share the feature width"));
        }
        for row in m.frames.rows().into_iter().take(m.valid_len()) {
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
            }
            count += 1;
        }
        motions_seen.push(m);
    }
    if count == 0 {
        return Err(Error::invalid("cannot fit normalization on an empty dataset"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    // second pass about the mean for accuracy
    for m in &motions_seen {
        for row in m.frames.rows().into_iter().take(m.valid_len()) {
            for (j, v) in row.iter().enumerate() {
                sumsq[j] += (v - mean[j]).powi(2);
            }
        }
    }
    let std = sumsq
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let sd = (s / count as f64).sqrt();
            if sd < MIN_STD {
                log::warn!("feature {j} has zero variance; clamping std to {MIN_STD}");
                MIN_STD
            } else {
                sd
            }
        })
        .collect();
    Ok(NormalizationStats { mean, std })
}

pub fn normalize(motion: &MotionSequence, stats: &NormalizationStats) -> Result<MotionSequence> {
    check(motion, stats)?;
    let mut out = motion.clone();
    for mut row in out.frames.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(out)
}

pub fn denormalize(motion: &MotionSequence, stats: &NormalizationStats) -> Result<MotionSequence> {
    check(motion, stats)?;
    let mut out = motion.clone();
    for mut row in out.frames.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * stats.std[j] + stats.mean[j];
        }
    }
    Ok(out)
}

fn check(motion: &MotionSequence, stats: &NormalizationStats) -> Result<()> {
    stats.validate()?;
    if motion.dim() != stats.dim() {
        return Err(Error::invalid(format!(
            "motion has {} features, statistics have {}",
            motion.dim(),
            stats.dim()
        )));
    }
    Ok(())
}
