use ndarray::{Array1, Array2};

use super::codec::TextCodec;
use crate::data::{denormalize, normalize, FrameLabelTrack, MotionSequence, NormalizationStats};
use crate::diffusion::{item_seed, sample_items, NoiseSchedule, SampleItem, SamplerConfig, TaskMode};
use crate::error::{Error, Result};
use crate::nn::Denoiser;

/// A trained denoiser together with everything needed to move between data
/// space and model space.
#[derive(Debug, Clone, PartialEq)]
pub struct UniModel {
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub norm: NormalizationStats,
    pub codec: TextCodec,
    /// Frame rate of generated motion.
    pub fps: u32,
}

/// Inputs for one generated sequence. Which fields are read depends on the mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Request {
    pub frames: usize,
    pub motion: Option<MotionSequence>,
    pub track: Option<FrameLabelTrack>,
    pub sentence: Option<String>,
}

impl Request {
    pub fn from_track(track: FrameLabelTrack, sentence: Option<String>) -> Self {
        Request {
            frames: track.n_frames(),
            track: Some(track),
            sentence,
            ..Request::default()
        }
    }

    pub fn from_motion(motion: MotionSequence, sentence: Option<String>) -> Self {
        let motion = motion.trimmed();
        Request {
            frames: motion.len(),
            motion: Some(motion),
            sentence,
            ..Request::default()
        }
    }

    pub fn from_sentence(frames: usize, sentence: Option<String>) -> Self {
        Request {
            frames,
            sentence,
            ..Request::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub motion: Option<MotionSequence>,
    pub track: Option<FrameLabelTrack>,
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

impl UniModel {
    pub fn new(
        denoiser: Denoiser<f32>,
        schedule: NoiseSchedule,
        norm: NormalizationStats,
        codec: TextCodec,
        fps: u32,
    ) -> Result<Self> {
        let c = &denoiser.config;
        schedule.validate()?;
        norm.validate()?;
        if c.max_timestep != schedule.steps() {
            return Err(Error::invalid(format!(
                "denoiser was built for {} timesteps but the schedule has {}",
                c.max_timestep,
                schedule.steps()
            )));
        }
        if c.motion_dim != norm.dim() {
            return Err(Error::invalid(format!(
                "denoiser motion width {} does not match normalization width {}",
                c.motion_dim,
                norm.dim()
            )));
        }
        if c.text_dim != codec.dim() {
            return Err(Error::invalid(format!(
                "denoiser text width {} does not match the codec's {}",
                c.text_dim,
                codec.dim()
            )));
        }
        if c.cond_dim != codec.encoder.dim() {
            return Err(Error::invalid(format!(
                "denoiser condition width {} does not match the encoder's {}",
                c.cond_dim,
                codec.encoder.dim()
            )));
        }
        if fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(UniModel {
            denoiser,
            schedule,
            norm,
            codec,
            fps,
        })
    }

    pub fn motion_dim(&self) -> usize {
        self.denoiser.config.motion_dim
    }

    pub fn text_dim(&self) -> usize {
        self.denoiser.config.text_dim
    }

    pub fn max_frames(&self) -> usize {
        self.denoiser.config.max_frames
    }

    /// Normalized motion in model precision.
    pub fn motion_to_model(&self, motion: &MotionSequence) -> Result<Array2<f32>> {
        if motion.dim() != self.motion_dim() {
            return Err(Error::invalid(format!(
                "motion has {} features, the model expects {}",
                motion.dim(),
                self.motion_dim()
            )));
        }
        Ok(to_f32(&normalize(&motion.trimmed(), &self.norm)?.frames))
    }

    pub fn motion_from_model(&self, x: &Array2<f32>, fps: u32) -> Result<MotionSequence> {
        let m = MotionSequence::new(x.mapv(f64::from), fps)
            .map_err(|_| Error::Numerical("generated motion is not finite".into()))?;
        denormalize(&m, &self.norm)
    }

    /// Runs one batched sampling job. Request `i` uses the seed `item_seed(cfg.seed, i)`,
    /// so a request's output does not depend on the other requests.
    pub fn generate(&self, cfg: &SamplerConfig, requests: &[Request]) -> Result<Vec<Generated>> {
        let mode = cfg.mode;
        let sentences: Vec<String> = requests.iter().filter_map(|r| r.sentence.clone()).collect();
        let mut embedded = self.codec.embed_sentences(&sentences)?.into_iter();
        let mut items = Vec::with_capacity(requests.len());
        for (i, r) in requests.iter().enumerate() {
            if r.frames == 0 || r.frames > self.max_frames() {
                return Err(Error::invalid(format!(
                    "requested {} frames; the model handles 1..={}",
                    r.frames,
                    self.max_frames()
                )));
            }
            let x = match (&r.motion, mode.needs_motion()) {
                (Some(m), true) => {
                    let x = self.motion_to_model(m)?;
                    if x.nrows() != r.frames {
                        return Err(Error::invalid("request frame count disagrees with its motion"));
                    }
                    Some(x)
                }
                _ => None,
            };
            let y = match (&r.track, mode.needs_track()) {
                (Some(t), true) => {
                    if t.n_frames() != r.frames {
                        return Err(Error::invalid("request frame count disagrees with its track"));
                    }
                    Some(to_f32(&self.codec.encode_track(t)?))
                }
                _ => None,
            };
            let cond: Option<Array1<f32>> = r
                .sentence
                .as_ref()
                .map(|_| embedded.next().expect("one embedding per sentence").mapv(|v| v as f32));
            items.push(SampleItem {
                frames: r.frames,
                x,
                y,
                cond,
                seed: item_seed(cfg.seed, i as u64),
            });
        }
        let results = sample_items(
            &self.denoiser,
            &self.schedule,
            cfg,
            (self.motion_dim(), self.text_dim()),
            &items,
        )?;
        requests
            .iter()
            .zip(results)
            .map(|(r, out)| {
                let fps = r.motion.as_ref().map_or(self.fps, |m| m.fps);
                let motion = if mode.produces_motion() {
                    Some(self.motion_from_model(&out.x, fps)?)
                } else {
                    None
                };
                let track = if mode.produces_track() {
                    Some(self.codec.decode_track(&out.y.mapv(f64::from), cfg.decode_window)?)
                } else {
                    None
                };
                Ok(Generated { motion, track })
            })
            .collect()
    }

    fn one(&self, cfg: &SamplerConfig, mode: TaskMode, request: Request) -> Result<Generated> {
        let cfg = SamplerConfig { mode, ..cfg.clone() };
        Ok(self.generate(&cfg, &[request])?.remove(0))
    }

    /// Motion from a frame-level track, optionally with a sentence.
    pub fn sample_conditional_motion(
        &self,
        track: &FrameLabelTrack,
        sentence: Option<&str>,
        cfg: &SamplerConfig,
    ) -> Result<MotionSequence> {
        let mode = if sentence.is_some() { TaskMode::T2mHier } else { TaskMode::T2mFrame };
        let req = Request::from_track(track.clone(), sentence.map(str::to_string));
        Ok(self.one(cfg, mode, req)?.motion.expect("motion mode"))
    }

    /// Frame-level track for a motion.
    pub fn sample_conditional_text(
        &self,
        motion: &MotionSequence,
        sentence: Option<&str>,
        cfg: &SamplerConfig,
    ) -> Result<FrameLabelTrack> {
        let req = Request::from_motion(motion.clone(), sentence.map(str::to_string));
        Ok(self.one(cfg, TaskMode::M2t, req)?.track.expect("text mode"))
    }

    /// Motion and track together, conditioned on a sentence when one is given.
    pub fn sample_joint(
        &self,
        frames: usize,
        sentence: Option<&str>,
        cfg: &SamplerConfig,
    ) -> Result<(MotionSequence, FrameLabelTrack)> {
        let mode = if sentence.is_some() { TaskMode::JointCond } else { TaskMode::JointUncond };
        let g = self.one(cfg, mode, Request::from_sentence(frames, sentence.map(str::to_string)))?;
        Ok((g.motion.expect("motion mode"), g.track.expect("text mode")))
    }

    /// Motion from a track and a required sentence.
    pub fn sample_hierarchical(
        &self,
        track: &FrameLabelTrack,
        sentence: Option<&str>,
        cfg: &SamplerConfig,
    ) -> Result<MotionSequence> {
        if sentence.is_none() {
            return Err(Error::invalid("hierarchical sampling needs a sentence; use t2m_frame without one"));
        }
        self.sample_conditional_motion(track, sentence, cfg)
    }

    /// Motion from a sentence alone.
    pub fn sample_from_sentence(&self, sentence: &str, frames: usize, cfg: &SamplerConfig) -> Result<MotionSequence> {
        let req = Request::from_sentence(frames, Some(sentence.to_string()));
        Ok(self.one(cfg, TaskMode::T2mSeq, req)?.motion.expect("motion mode"))
    }
}
