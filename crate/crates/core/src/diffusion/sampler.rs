use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::{cfg_combine, Denoise};
use super::schedule::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{DenoiserInput, Real};

/// Which modalities are given and which are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Motion from a frame-level track.
    T2mFrame,
    /// Motion from a sentence.
    T2mSeq,
    /// Motion from a track and a sentence.
    T2mHier,
    /// Frame-level track from motion.
    M2t,
    /// Motion and track together from a sentence.
    JointCond,
    /// Motion and track together from nothing.
    JointUncond,
}

impl TaskMode {
    pub const ALL: [TaskMode; 6] = [
        TaskMode::T2mFrame,
        TaskMode::T2mSeq,
        TaskMode::T2mHier,
        TaskMode::M2t,
        TaskMode::JointCond,
        TaskMode::JointUncond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskMode::T2mFrame => "t2m_frame",
            TaskMode::T2mSeq => "t2m_seq",
            TaskMode::T2mHier => "t2m_hier",
            TaskMode::M2t => "m2t",
            TaskMode::JointCond => "joint_cond",
            TaskMode::JointUncond => "joint_uncond",
        }
    }

    fn roles(self) -> (Role, Role) {
        match self {
            TaskMode::T2mFrame | TaskMode::T2mHier => (Role::Generate, Role::Clean),
            TaskMode::T2mSeq => (Role::Generate, Role::Marginal),
            TaskMode::M2t => (Role::Clean, Role::Generate),
            TaskMode::JointCond | TaskMode::JointUncond => (Role::Generate, Role::Generate),
        }
    }

    pub fn needs_track(self) -> bool {
        matches!(self, TaskMode::T2mFrame | TaskMode::T2mHier)
    }

    pub fn needs_motion(self) -> bool {
        self == TaskMode::M2t
    }

    pub fn needs_sentence(self) -> bool {
        matches!(self, TaskMode::T2mSeq | TaskMode::T2mHier | TaskMode::JointCond)
    }

    /// Modes that must run without a sentence.
    pub fn forbids_sentence(self) -> bool {
        matches!(self, TaskMode::T2mFrame | TaskMode::JointUncond)
    }

    pub fn produces_track(self) -> bool {
        matches!(self, TaskMode::M2t | TaskMode::JointCond | TaskMode::JointUncond)
    }

    pub fn produces_motion(self) -> bool {
        self != TaskMode::M2t
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = TaskMode::ALL.iter().map(|m| m.name()).collect();
                Error::usage(format!("unknown mode {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    /// Held at timestep 0.
    Clean,
    /// Denoised by the sampler.
    Generate,
    /// Fed as fresh noise at timestep T every iteration.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of reverse iterations, strided over the training schedule.
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub mode: TaskMode,
    /// Largest number of sequences run through the denoiser at once.
    pub batch: usize,
    /// Majority-filter window applied when decoding frame text; off when unset.
    pub decode_window: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 100,
            guidance_scale: 2.5,
            seed: 0,
            mode: TaskMode::T2mFrame,
            batch: 64,
            decode_window: None,
        }
    }
}

/// One sequence to sample, in model space (normalized motion, scaled text embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleItem<F> {
    pub frames: usize,
    pub x: Option<Array2<F>>,
    pub y: Option<Array2<F>>,
    pub cond: Option<Array1<F>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult<F> {
    pub x: Array2<F>,
    pub y: Array2<F>,
}

/// Seed of the `index`-th sequence of a run seeded with `seed`.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::of(StandardNormal.sample(rng)))
}

fn check_item<F: Real>(item: &SampleItem<F>, mode: TaskMode, dx: usize, dy: usize) -> Result<()> {
    let (rx, ry) = mode.roles();
    if item.frames == 0 {
        return Err(Error::invalid("cannot sample an empty sequence"));
    }
    let need = |name: &str, given: &Option<Array2<F>>, role: Role, width: usize| -> Result<()> {
        match (role, given) {
            (Role::Clean, None) => Err(Error::usage(format!("mode {mode} needs a clean {name} input"))),
            (Role::Clean, Some(v)) if v.dim() != (item.frames, width) => Err(Error::invalid(format!(
                "{name} input has shape {:?}, expected ({}, {width})",
                v.dim(),
                item.frames
            ))),
            _ => Ok(()),
        }
    };
    need("motion", &item.x, rx, dx)?;
    need("frame-text", &item.y, ry, dy)?;
    if mode.needs_sentence() && item.cond.is_none() {
        return Err(Error::usage(format!("mode {mode} needs a sentence condition")));
    }
    if mode.forbids_sentence() && item.cond.is_some() {
        return Err(Error::usage(format!("mode {mode} runs without a sentence condition")));
    }
    Ok(())
}

/// Runs the reverse process for every item under `cfg.mode`.
///
/// Each iteration re-noises the current clean estimate of every generated
/// modality to level `t` with fresh noise and replaces it with the model's
/// prediction; clean inputs stay at timestep 0. With a sentence and a guidance
/// scale other than 1, predictions are guided over the condition.
pub fn sample_items<F: Real, M: Denoise<F>>(
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    dims: (usize, usize),
    items: &[SampleItem<F>],
) -> Result<Vec<SampleResult<F>>> {
    let (dx, dy) = dims;
    for item in items {
        check_item(item, cfg.mode, dx, dy)?;
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("sampler batch must be positive"));
    }
    let timesteps = schedule.sampling_timesteps(cfg.steps)?;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(cfg.batch) {
        out.extend(sample_chunk(model, schedule, cfg, dims, chunk, &timesteps)?);
    }
    Ok(out)
}

fn sample_chunk<F: Real, M: Denoise<F>>(
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    (dx, dy): (usize, usize),
    items: &[SampleItem<F>],
    timesteps: &[usize],
) -> Result<Vec<SampleResult<F>>> {
    let (rx, ry) = cfg.mode.roles();
    let b = items.len();
    let n = items.iter().map(|i| i.frames).max().unwrap_or(0);
    let big_t = schedule.steps();
    let mut rngs: Vec<ChaCha8Rng> = items.iter().map(|i| ChaCha8Rng::seed_from_u64(i.seed)).collect();
    let mut est_x: Vec<Array2<F>> = items
        .iter()
        .zip(rngs.iter_mut())
        .map(|(it, r)| match rx {
            Role::Clean => it.x.clone().expect("checked"),
            _ => gaussian(r, it.frames, dx),
        })
        .collect();
    let mut est_y: Vec<Array2<F>> = items
        .iter()
        .zip(rngs.iter_mut())
        .map(|(it, r)| match ry {
            Role::Clean => it.y.clone().expect("checked"),
            _ => gaussian(r, it.frames, dy),
        })
        .collect();
    let mut mask = Array2::from_elem((b, n), false);
    for (i, it) in items.iter().enumerate() {
        mask.slice_mut(s![i, ..it.frames]).fill(true);
    }
    let guided: Vec<bool> = items.iter().map(|it| it.cond.is_some() && cfg.guidance_scale != 1.0).collect();
    let any_guided = guided.iter().any(|&g| g);

    for &t in timesteps {
        let mut x_in = Array3::<F>::zeros((b, n, dx));
        let mut y_in = Array3::<F>::zeros((b, n, dy));
        let mut t_x = vec![0; b];
        let mut t_y = vec![0; b];
        for i in 0..b {
            let f = items[i].frames;
            let r = &mut rngs[i];
            let (xi, txi) = prepare(&est_x[i], rx, t, big_t, r, schedule)?;
            let (yi, tyi) = prepare(&est_y[i], ry, t, big_t, r, schedule)?;
            x_in.slice_mut(s![i, ..f, ..]).assign(&xi);
            y_in.slice_mut(s![i, ..f, ..]).assign(&yi);
            t_x[i] = txi;
            t_y[i] = tyi;
        }
        let cond: Vec<Option<Array1<F>>> = items.iter().map(|it| it.cond.clone()).collect();
        let input = DenoiserInput {
            x: x_in.view(),
            y: y_in.view(),
            t_x: &t_x,
            t_y: &t_y,
            cond: &cond,
            mask: mask.view(),
        };
        let mut pred = model.denoise(&input)?;
        if any_guided {
            let null: Vec<Option<Array1<F>>> = vec![None; b];
            let uncond = model.denoise(&DenoiserInput { cond: &null, ..input })?;
            let gx = cfg_combine(&pred.x, &uncond.x, cfg.guidance_scale)?;
            let gy = cfg_combine(&pred.y, &uncond.y, cfg.guidance_scale)?;
            for (i, &g) in guided.iter().enumerate() {
                if g {
                    pred.x.slice_mut(s![i, .., ..]).assign(&gx.slice(s![i, .., ..]));
                    pred.y.slice_mut(s![i, .., ..]).assign(&gy.slice(s![i, .., ..]));
                }
            }
        }
        for i in 0..b {
            let f = items[i].frames;
            if rx == Role::Generate {
                est_x[i] = pred.x.slice(s![i, ..f, ..]).to_owned();
            }
            if ry == Role::Generate {
                est_y[i] = pred.y.slice(s![i, ..f, ..]).to_owned();
            }
        }
        if pred.x.iter().chain(pred.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite prediction at timestep {t}")));
        }
    }
    Ok(est_x
        .into_iter()
        .zip(est_y)
        .map(|(x, y)| SampleResult { x, y })
        .collect())
}

fn prepare<F: Real>(
    est: &Array2<F>,
    role: Role,
    t: usize,
    big_t: usize,
    rng: &mut ChaCha8Rng,
    schedule: &NoiseSchedule,
) -> Result<(Array2<F>, usize)> {
    let (rows, cols) = est.dim();
    match role {
        Role::Clean => Ok((est.clone(), 0)),
        Role::Generate => {
            let eps = gaussian(rng, rows, cols);
            Ok((q_sample(est, t, &eps, schedule)?, t))
        }
        Role::Marginal => Ok((gaussian(rng, rows, cols), big_t)),
    }
}

/// Motion given clean frame embeddings `y0` and an optional sentence (t2m_frame / t2m_hier).
pub fn sample_conditional_motion<F: Real, M: Denoise<F>>(
    y0: &Array2<F>,
    cond: Option<&Array1<F>>,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    motion_dim: usize,
) -> Result<Array2<F>> {
    let mode = if cond.is_some() { TaskMode::T2mHier } else { TaskMode::T2mFrame };
    let cfg = SamplerConfig { mode, ..cfg.clone() };
    let item = SampleItem {
        frames: y0.nrows(),
        x: None,
        y: Some(y0.clone()),
        cond: cond.cloned(),
        seed: cfg.seed,
    };
    Ok(sample_items(model, schedule, &cfg, (motion_dim, y0.ncols()), &[item])?.remove(0).x)
}

/// Frame embeddings given clean motion `x0` and an optional sentence (m2t).
pub fn sample_conditional_text<F: Real, M: Denoise<F>>(
    x0: &Array2<F>,
    cond: Option<&Array1<F>>,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    text_dim: usize,
) -> Result<Array2<F>> {
    let cfg = SamplerConfig {
        mode: TaskMode::M2t,
        ..cfg.clone()
    };
    let item = SampleItem {
        frames: x0.nrows(),
        x: Some(x0.clone()),
        y: None,
        cond: cond.cloned(),
        seed: cfg.seed,
    };
    Ok(sample_items(model, schedule, &cfg, (x0.ncols(), text_dim), &[item])?.remove(0).y)
}

/// Both modalities from noise, with or without a sentence.
pub fn sample_joint<F: Real, M: Denoise<F>>(
    frames: usize,
    cond: Option<&Array1<F>>,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    dims: (usize, usize),
) -> Result<SampleResult<F>> {
    let mode = if cond.is_some() { TaskMode::JointCond } else { TaskMode::JointUncond };
    let cfg = SamplerConfig { mode, ..cfg.clone() };
    let item = SampleItem {
        frames,
        x: None,
        y: None,
        cond: cond.cloned(),
        seed: cfg.seed,
    };
    Ok(sample_items(model, schedule, &cfg, dims, &[item])?.remove(0))
}

/// Motion from frame embeddings and a required sentence.
pub fn sample_hierarchical<F: Real, M: Denoise<F>>(
    y0: &Array2<F>,
    cond: Option<&Array1<F>>,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    motion_dim: usize,
) -> Result<Array2<F>> {
    if cond.is_none() {
        return Err(Error::invalid("hierarchical sampling needs a sentence; use t2m_frame without one"));
    }
    sample_conditional_motion(y0, cond, model, schedule, cfg, motion_dim)
}
