//! On-disk dataset layout and the external motion adapter.
//!
//! A dataset directory holds `manifest.json` and `records.jsonl` (one record per line).
//! External motion is a matrix file (`.txt`/`.csv` text rows or little-endian `f32`
//! binary) next to a sidecar `<file>.manifest.json` declaring `d_x` and `fps`.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::types::{DatasetRecord, FrameLabelTrack, MotionSequence, Segment, TRANSITION_LABEL};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub d_x: usize,
    pub fps: u32,
    pub size: usize,
    pub label_vocabulary: Vec<String>,
    pub generator_version: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    fps: u32,
    frames: Vec<Vec<f64>>,
    mask: Vec<bool>,
    segments: Option<Vec<Segment>>,
    global_text: Option<String>,
}

impl RecordLine {
    fn from_record(r: &DatasetRecord) -> Self {
        RecordLine {
            id: r.id.clone(),
            fps: r.motion.fps,
            frames: r.motion.frames.rows().into_iter().map(|row| row.to_vec()).collect(),
            mask: r.motion.mask.clone(),
            segments: r.track.as_ref().map(|t| t.segments.clone()),
            global_text: r.global_text.clone(),
        }
    }

    fn into_record(self) -> Result<DatasetRecord> {
        let frames = rows_to_matrix(&self.frames)?;
        let motion = MotionSequence::with_mask(frames, self.fps, self.mask)?;
        let track = self.segments.map(FrameLabelTrack::new).transpose()?;
        Ok(DatasetRecord {
            id: self.id,
            motion,
            track,
            global_text: self.global_text,
        })
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("matrix rows have differing lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| Error::invalid(e.to_string()))
}

/// Writes a dataset directory. Refuses to touch an existing dataset unless `force`.
pub fn write_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    records: &[DatasetRecord],
    force: bool,
) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::usage(format!(
            "{} already holds a dataset (pass --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &RecordLine::from_record(r))?;
        buf.push(b'\n');
    }
    let records_path = dir.join(RECORDS_FILE);
    fs::write(&records_path, buf).map_err(|e| Error::io(&records_path, e))?;
    write_json(&manifest_path, manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DatasetRecord>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(RECORDS_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::with_capacity(manifest.size);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let rec = rec.into_record()?;
        if rec.motion.dim() != manifest.d_x {
            return Err(Error::invalid(format!(
                "record {} has {} features, manifest declares {}",
                rec.id,
                rec.motion.dim(),
                manifest.d_x
            )));
        }
        records.push(rec);
    }
    if records.len() != manifest.size {
        return Err(Error::invalid(format!(
            "manifest declares {} records, found {}",
            manifest.size,
            records.len()
        )));
    }
    let mut ids = std::collections::HashSet::new();
    for r in &records {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::invalid(format!("duplicate record id {}", r.id)));
        }
    }
    Ok((manifest, records))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    /// Whitespace- or comma-separated rows, one frame per line.
    Text,
    /// Row-major little-endian `f32`.
    F32Le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixManifest {
    pub d_x: usize,
    pub fps: u32,
    #[serde(default)]
    pub format: Option<MatrixFormat>,
    /// Optional frame labels of the matrix; frames outside every span become
    /// [`TRANSITION_LABEL`].
    #[serde(default)]
    pub segments: Option<Vec<Segment>>,
}

pub fn sidecar_path(matrix: &Path) -> PathBuf {
    let mut name = matrix.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Reads an externally produced feature matrix through its sidecar manifest.
pub fn read_external_motion(path: &Path) -> Result<(MotionSequence, Option<FrameLabelTrack>)> {
    let manifest: MatrixManifest = read_json(&sidecar_path(path))?;
    let format = manifest.format.unwrap_or_else(|| {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("f32") => MatrixFormat::F32Le,
            _ => MatrixFormat::Text,
        }
    });
    let flat: Vec<f64> = match format {
        MatrixFormat::F32Le => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::invalid("binary matrix length is not a multiple of 4 bytes"));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        MatrixFormat::Text => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut values = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let row: std::result::Result<Vec<f64>, _> = line
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(str::parse::<f64>)
                    .collect();
                let row = row.map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?;
                if row.len() != manifest.d_x {
                    return Err(Error::invalid(format!(
                        "line {} has {} values, manifest declares d_x = {}",
                        i + 1,
                        row.len(),
                        manifest.d_x
                    )));
                }
                values.extend(row);
            }
            values
        }
    };
    if manifest.d_x == 0 || flat.len() % manifest.d_x != 0 {
        return Err(Error::invalid(format!(
            "{} values cannot be split into rows of {}",
            flat.len(),
            manifest.d_x
        )));
    }
    let n = flat.len() / manifest.d_x;
    let frames = Array2::from_shape_vec((n, manifest.d_x), flat)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let motion = MotionSequence::new(frames, manifest.fps)?;
    let track = manifest
        .segments
        .map(|segs| fill_unlabeled(&segs, n))
        .transpose()?;
    Ok((motion, track))
}

/// Covers every frame outside a labeled span with [`TRANSITION_LABEL`].
pub fn fill_unlabeled(segments: &[Segment], n_frames: usize) -> Result<FrameLabelTrack> {
    let mut segs: Vec<Segment> = segments.to_vec();
    segs.sort_by_key(|s| s.start);
    let mut out = Vec::new();
    let mut cursor = 0;
    for s in segs {
        if s.start < cursor || s.end > n_frames || s.end <= s.start {
            return Err(Error::invalid(format!(
                "segment [{}, {}) overlaps another or leaves the sequence",
                s.start, s.end
            )));
        }
        if s.start > cursor {
            out.push(Segment::new(cursor, s.start, TRANSITION_LABEL));
        }
        cursor = s.end;
        out.push(s);
    }
    if cursor < n_frames {
        out.push(Segment::new(cursor, n_frames, TRANSITION_LABEL));
    }
    FrameLabelTrack::new(out)
}
