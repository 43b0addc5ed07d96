use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Lineage};
use super::codec::TextCodec;
use super::model::UniModel;
use crate::codec::EncoderSpec;
use crate::data::io::DatasetManifest;
use crate::data::{fit_normalization, DatasetRecord};
use crate::diffusion::{make_schedule, training_step, ScheduleKind, TrainingBatch};
use crate::error::{Error, Result};
use crate::nn::{gradient_norm, Denoiser, DenoiserConfig, DenoiserWeights};

/// Architecture and codec choices for a fresh model. Data-dependent widths
/// (motion, condition) come from the dataset and encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_frames: usize,
    pub dropout: f64,
    /// Compressed frame-text width `d_e`.
    pub text_dim: usize,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub encoder: EncoderSpec,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        ModelConfig {
            model_dim: d.model_dim,
            layers: d.layers,
            heads: d.heads,
            ff_dim: d.ff_dim,
            max_frames: d.max_frames,
            dropout: d.dropout,
            text_dim: d.text_dim,
            schedule: ScheduleKind::Cosine,
            timesteps: d.max_timestep,
            encoder: EncoderSpec::default(),
            init_seed: 0,
        }
    }
}

/// Fits normalization and the text codec on `records` and initializes a denoiser.
pub fn build_model(records: &[DatasetRecord], manifest: &DatasetManifest, cfg: &ModelConfig) -> Result<UniModel> {
    if records.is_empty() {
        return Err(Error::invalid("cannot build a model from an empty dataset"));
    }
    let norm = fit_normalization(records.iter().map(|r| &r.motion))?;
    let codec = TextCodec::fit(
        cfg.encoder.clone(),
        &manifest.label_vocabulary,
        records.iter().filter_map(|r| r.track.as_ref()),
        cfg.text_dim,
    )?;
    let dcfg = DenoiserConfig {
        model_dim: cfg.model_dim,
        layers: cfg.layers,
        heads: cfg.heads,
        ff_dim: cfg.ff_dim,
        max_frames: cfg.max_frames,
        motion_dim: manifest.d_x,
        text_dim: cfg.text_dim,
        cond_dim: cfg.encoder.dim(),
        dropout: cfg.dropout,
        max_timestep: cfg.timesteps,
    };
    let denoiser = Denoiser::new(dcfg, cfg.init_seed)?;
    let schedule = make_schedule(cfg.schedule, cfg.timesteps)?;
    UniModel::new(denoiser, schedule, norm, codec, manifest.fps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Floor of the cosine decay that follows warmup.
    pub min_learning_rate: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub p_drop: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 6000,
            batch_size: 32,
            learning_rate: 1e-3,
            min_learning_rate: 1e-4,
            warmup_steps: 300,
            grad_clip: 1.0,
            p_drop: 0.1,
            seed: 0,
            checkpoint_every: 1000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.min_learning_rate >= 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::invalid("p_drop must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::invalid("invalid Adam hyperparameters"));
        }
        Ok(())
    }

    /// Learning rate used at 0-based `step`: linear warmup, then cosine decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.min_learning_rate + (self.learning_rate - self.min_learning_rate) * cos
    }

    /// True when `other` only differs in run length or checkpoint cadence.
    fn compatible(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            steps: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Adam moments and the number of completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: DenoiserWeights<f32>,
    pub v: DenoiserWeights<f32>,
}

impl AdamState {
    pub fn new(config: &DenoiserConfig) -> Self {
        AdamState {
            step: 0,
            m: DenoiserWeights::zeros(config),
            v: DenoiserWeights::zeros(config),
        }
    }
}

/// One training example in model space.
#[derive(Debug, Clone, PartialEq)]
struct Example {
    x: Array2<f32>,
    y: Option<Array2<f32>>,
    cond: Option<Array1<f32>>,
}

/// Refuses datasets that do not fit the model.
pub fn check_dataset(model: &UniModel, manifest: &DatasetManifest, records: &[DatasetRecord]) -> Result<()> {
    if manifest.d_x != model.motion_dim() {
        return Err(Error::invalid(format!(
            "dataset has {} motion features, the model expects {}",
            manifest.d_x,
            model.motion_dim()
        )));
    }
    if manifest.fps != model.fps {
        return Err(Error::invalid(format!(
            "dataset runs at {} fps, the model at {}",
            manifest.fps, model.fps
        )));
    }
    if let Some(l) = manifest
        .label_vocabulary
        .iter()
        .find(|l| model.codec.database.get(l).is_none())
    {
        return Err(Error::invalid(format!("dataset label {l:?} is unknown to the model")));
    }
    if records.is_empty() {
        return Err(Error::invalid("dataset has no records"));
    }
    for r in records {
        r.validate_for_training()?;
        if r.motion.valid_len() > model.max_frames() {
            return Err(Error::invalid(format!(
                "record {} has {} frames, more than max_frames {}",
                r.id,
                r.motion.valid_len(),
                model.max_frames()
            )));
        }
    }
    Ok(())
}

fn prepare(model: &UniModel, records: &[DatasetRecord]) -> Result<Vec<Example>> {
    let texts: Vec<String> = records.iter().filter_map(|r| r.global_text.clone()).collect();
    let mut embedded = model.codec.embed_sentences(&texts)?.into_iter();
    records
        .iter()
        .map(|r| {
            let x = model.motion_to_model(&r.motion)?;
            let y = match &r.track {
                Some(t) => {
                    if t.n_frames() != x.nrows() {
                        return Err(Error::invalid(format!("record {}: track and motion lengths differ", r.id)));
                    }
                    Some(model.codec.encode_track(t)?.mapv(|v| v as f32))
                }
                None => None,
            };
            let cond = r
                .global_text
                .as_ref()
                .map(|_| embedded.next().expect("embedding per text").mapv(|v| v as f32));
            Ok(Example { x, y, cond })
        })
        .collect()
}

fn assemble(data: &[Example], indices: &[usize], dx: usize, dy: usize) -> TrainingBatch<f32> {
    let b = indices.len();
    let n = indices.iter().map(|&i| data[i].x.nrows()).max().unwrap_or(0);
    let mut x0 = Array3::zeros((b, n, dx));
    let mut y0 = Array3::zeros((b, n, dy));
    let mut mask = Array2::from_elem((b, n), false);
    let mut cond = Vec::with_capacity(b);
    let mut y_known = Vec::with_capacity(b);
    for (k, &i) in indices.iter().enumerate() {
        let e = &data[i];
        let f = e.x.nrows();
        x0.slice_mut(s![k, ..f, ..]).assign(&e.x);
        if let Some(y) = &e.y {
            y0.slice_mut(s![k, ..f, ..]).assign(y);
        }
        mask.slice_mut(s![k, ..f]).fill(true);
        cond.push(e.cond.clone());
        y_known.push(e.y.is_some());
    }
    TrainingBatch {
        x0,
        y0,
        cond,
        mask,
        y_known,
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub loss_x: f64,
    pub loss_y: f64,
    pub dropped: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub elapsed_ms: f64,
}

pub struct Trainer {
    pub model: UniModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub lineage: Lineage,
    data: Vec<Example>,
}

impl Trainer {
    pub fn new(
        model: UniModel,
        manifest: &DatasetManifest,
        records: &[DatasetRecord],
        config: TrainConfig,
        init_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        check_dataset(&model, manifest, records)?;
        let data = prepare(&model, records)?;
        Ok(Trainer {
            adam: AdamState::new(&model.denoiser.config),
            lineage: Lineage {
                init_seed,
                train_seed: config.seed,
                step: 0,
                parent: None,
            },
            model,
            config,
            data,
        })
    }

    /// Continues from a checkpoint written by a trainer. Only the step count and
    /// checkpoint cadence may differ from the stored configuration.
    pub fn resume(
        checkpoint: Checkpoint,
        parent_hash: &str,
        manifest: &DatasetManifest,
        records: &[DatasetRecord],
        config: TrainConfig,
    ) -> Result<Self> {
        let stored = checkpoint
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training configuration".into()))?;
        let adam = checkpoint
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        if !stored.compatible(&config) {
            return Err(Error::usage(
                "training configuration differs from the checkpoint beyond steps/checkpoint_every",
            ));
        }
        config.validate()?;
        check_dataset(&checkpoint.model, manifest, records)?;
        let data = prepare(&checkpoint.model, records)?;
        let mut lineage = checkpoint.lineage;
        lineage.parent = Some(parent_hash.to_string());
        Ok(Trainer {
            model: checkpoint.model,
            adam,
            config,
            lineage,
            data,
        })
    }

    pub fn completed_steps(&self) -> u64 {
        self.adam.step
    }

    /// Runs one update. All randomness of step `k` comes from stream `k` of
    /// the training seed, so resumed runs replay the same draws.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let k = self.adam.step;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(k);
        let indices: Vec<usize> = (0..self.config.batch_size)
            .map(|_| rng.gen_range(0..self.data.len()))
            .collect();
        let batch = assemble(&self.data, &indices, self.model.motion_dim(), self.model.text_dim());
        let out = training_step(&batch, &self.model.denoiser, &self.model.schedule, &mut rng, self.config.p_drop)?;
        let mut grad = out.grad;
        let norm = gradient_norm(&grad);
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm} at step {k}")));
        }
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let scale = (self.config.grad_clip / norm) as f32;
            for (_, mut g) in grad.tensors_mut() {
                g.mapv_inplace(|v| v * scale);
            }
        }
        let lr = self.config.lr_at(k);
        self.adam_update(&grad, lr);
        if !self.model.denoiser.weights.all_finite() {
            return Err(Error::Numerical(format!("weights became non-finite at step {k}")));
        }
        self.lineage.step = self.adam.step;
        Ok(StepRecord {
            step: k + 1,
            loss: out.loss,
            loss_x: out.loss_x,
            loss_y: out.loss_y,
            dropped: out.dropped,
            batch: self.config.batch_size,
            lr,
            grad_norm: norm,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn adam_update(&mut self, grad: &DenoiserWeights<f32>, lr: f64) {
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t))) as f32;
        let eps = (c.adam_eps * (1.0 - c.beta2.powi(t)).sqrt()) as f32;
        let params = self.model.denoiser.weights.tensors_mut();
        let ms = self.adam.m.tensors_mut();
        let vs = self.adam.v.tensors_mut();
        let gs = grad.tensors();
        for ((((_, mut w), (_, mut m)), (_, mut v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            Zip::from(&mut w).and(&mut m).and(&mut v).and(&g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() + eps);
            });
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.adam.clone()),
            lineage: self.lineage.clone(),
            train: Some(self.config.clone()),
        }
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LOCK_FILE: &str = "train.lock";
pub const FINAL_CHECKPOINT: &str = "model.safetensors";

/// Exclusive claim on a training output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::usage(format!(
                "{} is locked by another training run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.safetensors"))
}

/// Trains until `config.steps` updates are done, appending to the log and
/// writing periodic and final checkpoints. Returns the final checkpoint's hash.
pub fn train_to_dir(trainer: &mut Trainer, dir: &Path) -> Result<String> {
    let _lock = DirLock::acquire(dir)?;
    let log_path = dir.join(LOG_FILE);
    let file = if trainer.completed_steps() == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().append(true).create(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    while trainer.completed_steps() < trainer.config.steps {
        let rec = trainer.step()?;
        serde_json::to_writer(&mut log, &rec)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        if rec.step % 100 == 0 {
            log::info!("step {} loss {:.4} (x {:.4}, y {:.4}) lr {:.2e}", rec.step, rec.loss, rec.loss_x, rec.loss_y, rec.lr);
        }
        let every = trainer.config.checkpoint_every;
        if every > 0 && rec.step % every == 0 && rec.step < trainer.config.steps {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.checkpoint().save(&checkpoint_path(dir, rec.step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.checkpoint().save(&dir.join(FINAL_CHECKPOINT))
}

/// Reads a training log written by [`train_to_dir`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
