use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature layout of generated motion frames.
pub mod feature {
    pub const POS_X: usize = 0;
    pub const POS_Y: usize = 1;
    pub const VEL_X: usize = 2;
    pub const VEL_Y: usize = 3;
    pub const HEADING_SIN: usize = 4;
    pub const HEADING_COS: usize = 5;
    /// Width of a generated frame.
    pub const DIM: usize = 6;
}

/// Label reserved for spans of external data that carry no annotation.
pub const TRANSITION_LABEL: &str = "transition";

/// A per-frame motion feature matrix with a suffix-padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Array2<f64>,
    pub fps: u32,
    pub mask: Vec<bool>,
}

impl MotionSequence {
    /// Builds a fully valid sequence (no padding).
    pub fn new(frames: Array2<f64>, fps: u32) -> Result<Self> {
        let n = frames.nrows();
        let seq = MotionSequence {
            frames,
            fps,
            mask: vec![true; n],
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn with_mask(frames: Array2<f64>, fps: u32, mask: Vec<bool>) -> Result<Self> {
        let seq = MotionSequence { frames, fps, mask };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.nrows();
        if n == 0 || self.frames.ncols() == 0 {
            return Err(Error::invalid("motion sequence must have at least one frame and feature"));
        }
        if self.fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        if self.mask.len() != n {
            return Err(Error::invalid(format!(
                "mask length {} does not match {} frames",
                self.mask.len(),
                n
            )));
        }
        if !self.mask[0] {
            return Err(Error::invalid("mask must start with a valid frame"));
        }
        let valid = self.valid_len();
        if self.mask[valid..].iter().any(|&m| m) {
            return Err(Error::invalid("valid frames must form a prefix of the mask"));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("motion features must be finite"));
        }
        Ok(())
    }

    /// Total number of rows, padding included.
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Number of valid (unpadded) frames.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    /// Copy restricted to the valid prefix.
    pub fn trimmed(&self) -> MotionSequence {
        let n = self.valid_len();
        MotionSequence {
            frames: self.frames.slice(ndarray::s![..n, ..]).to_owned(),
            fps: self.fps,
            mask: vec![true; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Exclusive end frame.
    pub end: usize,
    pub label: String,
}

impl Segment {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Segment {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Contiguous text segments tiling `[0, N)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabelTrack {
    pub segments: Vec<Segment>,
}

impl FrameLabelTrack {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let track = FrameLabelTrack { segments };
        track.validate()?;
        Ok(track)
    }

    /// Run-length merges per-frame labels into a track.
    pub fn from_frame_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot build a track from zero frames"));
        }
        let mut segments: Vec<Segment> = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            let label = label.as_ref();
            match segments.last_mut() {
                Some(seg) if seg.label == label => seg.end = i + 1,
                _ => segments.push(Segment::new(i, i + 1, label)),
            }
        }
        Ok(FrameLabelTrack { segments })
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .segments
            .first()
            .ok_or_else(|| Error::invalid("track must contain at least one segment"))?;
        if first.start != 0 {
            return Err(Error::invalid("track must start at frame 0"));
        }
        let mut expected = 0;
        for seg in &self.segments {
            if seg.start != expected {
                return Err(Error::invalid(format!(
                    "segment starting at {} leaves a gap or overlap (expected {})",
                    seg.start, expected
                )));
            }
            if seg.end <= seg.start {
                return Err(Error::invalid(format!(
                    "segment [{}, {}) is empty",
                    seg.start, seg.end
                )));
            }
            if seg.label.is_empty() {
                return Err(Error::invalid("segment label must be non-empty"));
            }
            expected = seg.end;
        }
        Ok(())
    }

    /// Number of frames covered.
    pub fn n_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    /// Label of every frame, in order.
    pub fn frame_labels(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.n_frames());
        for seg in &self.segments {
            out.extend(std::iter::repeat_n(seg.label.as_str(), seg.len()));
        }
        out
    }

    pub fn label_at(&self, frame: usize) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| s.start <= frame && frame < s.end)
            .map(|s| s.label.as_str())
    }

    pub fn check_vocabulary(&self, vocabulary: &[String]) -> Result<()> {
        for seg in &self.segments {
            if !vocabulary.iter().any(|v| v == &seg.label) {
                return Err(Error::invalid(format!(
                    "label {:?} is not in the vocabulary",
                    seg.label
                )));
            }
        }
        Ok(())
    }
}

/// Sequence-level condition; `None` text is the null token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct GlobalCondition {
    pub text: Option<String>,
}

impl GlobalCondition {
    pub fn null() -> Self {
        GlobalCondition { text: None }
    }

    pub fn text(text: impl Into<String>) -> Self {
        GlobalCondition {
            text: Some(text.into()),
        }
    }

    pub fn from_option(text: Option<String>) -> Self {
        GlobalCondition { text }
    }

    pub fn is_null(&self) -> bool {
        self.text.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub motion: MotionSequence,
    pub track: Option<FrameLabelTrack>,
    pub global_text: Option<String>,
}

impl DatasetRecord {
    pub fn validate_for_training(&self) -> Result<()> {
        self.motion.validate()?;
        if self.track.is_none() && self.global_text.is_none() {
            return Err(Error::invalid(format!(
                "record {} has neither a frame track nor a global text",
                self.id
            )));
        }
        if let Some(track) = &self.track {
            track.validate()?;
            if track.n_frames() != self.motion.valid_len() {
                return Err(Error::invalid(format!(
                    "record {}: track covers {} frames, motion has {}",
                    self.id,
                    track.n_frames(),
                    self.motion.valid_len()
                )));
            }
        }
        Ok(())
    }
}
