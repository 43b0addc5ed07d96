use std::fmt;
use std::str::FromStr;

use ndarray::{Array, ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?} (expected cosine or linear)"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

/// Variance schedule for `t = 1..=T`. Vectors are stored zero-based, so
/// `beta[t - 1]` is `β_t`; [`alpha_bar_at`](Self::alpha_bar_at) handles `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Builds a schedule with `steps` diffusion steps.
pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    LINEAR_BETA_START
                } else {
                    LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let v = ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
                v * v
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-12, MAX_BETA))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let schedule = NoiseSchedule {
        kind,
        beta,
        alpha,
        alpha_bar,
    };
    schedule.validate()?;
    Ok(schedule)
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.steps();
        if n == 0 || self.alpha.len() != n || self.alpha_bar.len() != n {
            return Err(Error::invalid("schedule vectors must share a positive length"));
        }
        let in_unit = |v: &f64| *v > 0.0 && *v < 1.0;
        if !self.beta.iter().all(in_unit) || !self.alpha.iter().all(in_unit) || !self.alpha_bar.iter().all(in_unit) {
            return Err(Error::invalid("schedule entries must lie strictly inside (0, 1)"));
        }
        if self.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing"));
        }
        Ok(())
    }

    /// `ᾱ_t` with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::invalid(format!("timestep {t} outside [0, {}]", self.steps()))),
        }
    }

    /// Descending sampling timesteps: `count` evenly strided values from `T` down to `T / count`.
    pub fn sampling_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count == 0 || count > t {
            return Err(Error::invalid(format!("sampling steps must lie in [1, {t}], got {count}")));
        }
        Ok((1..=count).rev().map(|i| (i * t + count / 2) / count).map(|v| v.max(1)).collect())
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample<F, S1, S2, D>(
    z0: &ArrayBase<S1, D>,
    t: usize,
    eps: &ArrayBase<S2, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>>
where
    F: Real,
    S1: Data<Elem = F>,
    S2: Data<Elem = F>,
    D: Dimension,
{
    if z0.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match data shape {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    let ab = schedule.alpha_bar_at(t)?;
    if t == 0 {
        return Ok(z0.to_owned());
    }
    let a = F::of(ab.sqrt());
    let b = F::of((1.0 - ab).sqrt());
    let mut out = z0.to_owned();
    out.zip_mut_with(eps, |z, &e| *z = a * *z + b * e);
    Ok(out)
}
