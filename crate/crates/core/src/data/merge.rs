//! Joining sequence-annotated and frame-annotated record sets over shared ids.

use std::collections::HashMap;

use super::types::DatasetRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MergeReport {
    /// Records present in both inputs, sorted by id.
    pub records: Vec<DatasetRecord>,
    /// Shared ids (mismatches included) over the size of the sequence-annotated set.
    pub overlap_fraction: f64,
    /// Shared ids dropped because the two sides disagree on the frame count.
    pub dropped: Vec<String>,
}

/// Keeps the id intersection; global text comes from the first set, tracks from the second.
pub fn merge_annotations(
    seq_annotated: &[DatasetRecord],
    frame_annotated: &[DatasetRecord],
) -> Result<MergeReport> {
    let mut by_id: HashMap<&str, &DatasetRecord> = HashMap::with_capacity(frame_annotated.len());
    for r in frame_annotated {
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(Error::invalid(format!("duplicate id {} in frame-annotated set", r.id)));
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(seq_annotated.len());
    let mut shared = 0usize;
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for a in seq_annotated {
        if !seen.insert(a.id.as_str()) {
            return Err(Error::invalid(format!("duplicate id {} in sequence-annotated set", a.id)));
        }
        let Some(b) = by_id.get(a.id.as_str()) else { continue };
        shared += 1;
        if a.motion.valid_len() != b.motion.valid_len() {
            log::warn!(
                "dropping {}: {} frames vs {} frames",
                a.id,
                a.motion.valid_len(),
                b.motion.valid_len()
            );
            dropped.push(a.id.clone());
            continue;
        }
        records.push(DatasetRecord {
            id: a.id.clone(),
            motion: a.motion.clone(),
            track: b.track.clone(),
            global_text: a.global_text.clone(),
        });
    }
    records.sort_by(|x, y| x.id.cmp(&y.id));
    dropped.sort();
    let overlap_fraction = if seq_annotated.is_empty() {
        0.0
    } else {
        shared as f64 / seq_annotated.len() as f64
    };
    Ok(MergeReport {
        records,
        overlap_fraction,
        dropped,
    })
}
