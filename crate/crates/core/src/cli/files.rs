use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::io::{read_external_motion, read_json, rows_to_matrix, write_json};
use crate::data::{FrameLabelTrack, MotionSequence, Segment};
use crate::error::{Error, Result};

/// Where an output came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool_version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Content hash of the checkpoint used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edits: Vec<Edit>,
}

impl Provenance {
    pub fn new(command: &str) -> Self {
        Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            mode: None,
            seed: None,
            checkpoint: None,
            edits: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub fps: u32,
    pub frames: Vec<Vec<f64>>,
}

impl MotionFile {
    pub fn new(motion: &MotionSequence, provenance: Option<Provenance>) -> Self {
        let m = motion.trimmed();
        MotionFile {
            provenance,
            fps: m.fps,
            frames: m.frames.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn motion(&self) -> Result<MotionSequence> {
        let frames: Array2<f64> = rows_to_matrix(&self.frames)?;
        MotionSequence::new(frames, self.fps)
    }
}

/// Reads a motion JSON file, or any other matrix through its sidecar manifest.
pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    if path.extension().is_some_and(|e| e == "json") {
        read_json::<MotionFile>(path)?.motion()
    } else {
        Ok(read_external_motion(path)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub fps: u32,
    pub n_frames: usize,
    pub segments: Vec<Segment>,
}

impl TrackFile {
    pub fn new(track: &FrameLabelTrack, fps: u32, provenance: Option<Provenance>) -> Self {
        TrackFile {
            provenance,
            fps,
            n_frames: track.n_frames(),
            segments: track.segments.clone(),
        }
    }

    pub fn track(&self) -> Result<FrameLabelTrack> {
        let t = FrameLabelTrack::new(self.segments.clone())?;
        if t.n_frames() != self.n_frames {
            return Err(Error::invalid(format!(
                "track segments cover {} frames, header says {}",
                t.n_frames(),
                self.n_frames
            )));
        }
        Ok(t)
    }
}

pub fn read_track(path: &Path) -> Result<TrackFile> {
    read_json(path)
}

pub fn write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cue {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

/// Timed captions of a frame-level track.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTrack {
    pub cues: Vec<Cue>,
    millis: Vec<(u64, u64)>,
}

fn frame_ms(frame: usize, fps: u32) -> u64 {
    let fps = fps as u64;
    (frame as u64 * 1000 + fps / 2) / fps
}

fn timestamp(ms: u64) -> String {
    format!("{:02}:{:02}:{:02}.{:03}", ms / 3_600_000, ms / 60_000 % 60, ms / 1000 % 60, ms % 1000)
}

impl CaptionTrack {
    pub fn from_track(track: &FrameLabelTrack, fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::invalid("captions need a positive frame rate"));
        }
        let cues = track
            .segments
            .iter()
            .map(|s| Cue {
                start: s.start as f64 / fps as f64,
                end: s.end as f64 / fps as f64,
                label: s.label.clone(),
            })
            .collect();
        let millis = track
            .segments
            .iter()
            .map(|s| (frame_ms(s.start, fps), frame_ms(s.end, fps)))
            .collect();
        Ok(CaptionTrack { cues, millis })
    }

    pub fn to_webvtt(&self) -> String {
        let mut out = String::from("WEBVTT\n\n");
        for (i, (cue, (a, b))) in self.cues.iter().zip(&self.millis).enumerate() {
            let _ = write!(out, "{}\n{} --> {}\n{}\n\n", i + 1, timestamp(*a), timestamp(*b), cue.label);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_webvtt()).map_err(|e| Error::io(path, e))
    }
}

/// One replacement applied to a segment of a track.
///
/// `label` relabels the segment; `end` moves its boundary with the next
/// segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edit {
    pub segment: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditScript {
    pub edits: Vec<Edit>,
}

impl EditScript {
    /// Applies the edits in order. Segment indices are zero-based and refer to
    /// the track as it stands when the edit runs.
    pub fn apply(&self, track: &FrameLabelTrack, vocabulary: &[String]) -> Result<FrameLabelTrack> {
        let mut segs = track.segments.clone();
        for (k, e) in self.edits.iter().enumerate() {
            if e.segment >= segs.len() {
                return Err(Error::usage(format!(
                    "edit {k} targets segment {} but the track has {} segments",
                    e.segment,
                    segs.len()
                )));
            }
            if let Some(label) = &e.label {
                if !vocabulary.contains(label) {
                    return Err(Error::usage(format!("edit {k}: label {label:?} is not in the vocabulary")));
                }
                segs[e.segment].label = label.clone();
            }
            if let Some(end) = e.end {
                let i = e.segment;
                if i + 1 == segs.len() {
                    return Err(Error::usage(format!("edit {k}: the last segment's end is fixed")));
                }
                if end <= segs[i].start || end >= segs[i + 1].end {
                    return Err(Error::usage(format!(
                        "edit {k}: end {end} must lie inside {}..{}",
                        segs[i].start + 1,
                        segs[i + 1].end
                    )));
                }
                segs[i].end = end;
                segs[i + 1].start = end;
            }
        }
        // relabeling can leave neighbours with equal labels; merge them
        let mut merged: Vec<Segment> = Vec::with_capacity(segs.len());
        for s in segs {
            match merged.last_mut() {
                Some(last) if last.label == s.label => last.end = s.end,
                _ => merged.push(s),
            }
        }
        FrameLabelTrack::new(merged)
    }
}
