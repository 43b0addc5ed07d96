//! Single-file checkpoints: named `f32` tensors plus one JSON metadata entry.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{serialize, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codec::TextCodec;
use super::model::UniModel;
use super::train::{AdamState, TrainConfig};
use crate::data::NormalizationStats;
use crate::diffusion::{make_schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{Denoiser, DenoiserConfig, DenoiserWeights};

pub const FORMAT_VERSION: u32 = 1;
/// Version of the tensor naming scheme.
pub const LAYOUT_VERSION: u32 = 1;
const METADATA_KEY: &str = "twinstep";

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lineage {
    pub init_seed: u64,
    pub train_seed: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Content hash of the checkpoint this run resumed from.
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UniModel,
    pub optimizer: Option<AdamState>,
    pub lineage: Lineage,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format_version: u32,
    layout_version: u32,
    denoiser: DenoiserConfig,
    schedule: ScheduleKind,
    timesteps: usize,
    normalization: NormalizationStats,
    codec: TextCodec,
    fps: u32,
    lineage: Lineage,
    train: Option<TrainConfig>,
    optimizer_step: Option<u64>,
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn le_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            layout_version: LAYOUT_VERSION,
            denoiser: model.denoiser.config.clone(),
            schedule: model.schedule.kind,
            timesteps: model.schedule.steps(),
            normalization: model.norm.clone(),
            codec: model.codec.clone(),
            fps: model.fps,
            lineage: self.lineage.clone(),
            train: self.train.clone(),
            optimizer_step: self.optimizer.as_ref().map(|a| a.step),
        };
        let mut groups: Vec<(&str, &DenoiserWeights<f32>)> = vec![("model", &model.denoiser.weights)];
        if let Some(adam) = &self.optimizer {
            groups.push(("adam.m", &adam.m));
            groups.push(("adam.v", &adam.v));
        }
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, w) in groups {
            for (name, t) in w.tensors() {
                buffers.push((format!("{prefix}.{name}"), t.shape().to_vec(), le_bytes(t.iter().copied())));
            }
        }
        let views = buffers
            .iter()
            .map(|(name, shape, data)| {
                TensorView::new(Dtype::F32, shape.clone(), data)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let header = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&meta)?)]);
        serialize(views, Some(header)).map_err(|e| bad(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, raw_meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let text = raw_meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| bad("missing metadata entry"))?;
        let meta: Metadata = serde_json::from_str(text)?;
        if meta.format_version != FORMAT_VERSION || meta.layout_version != LAYOUT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {}/{} (expected {FORMAT_VERSION}/{LAYOUT_VERSION})",
                meta.format_version, meta.layout_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        meta.denoiser.validate()?;
        let read = |prefix: &str| -> Result<DenoiserWeights<f32>> {
            let mut w = DenoiserWeights::<f32>::zeros(&meta.denoiser);
            for (name, mut t) in w.tensors_mut() {
                let key = format!("{prefix}.{name}");
                let view = st.tensor(&key).map_err(|_| bad(format!("missing tensor {key}")))?;
                if view.dtype() != Dtype::F32 || view.shape() != t.shape() {
                    return Err(bad(format!(
                        "tensor {key} is {:?} {:?}, expected F32 {:?}",
                        view.dtype(),
                        view.shape(),
                        t.shape()
                    )));
                }
                for (dst, chunk) in t.iter_mut().zip(view.data().chunks_exact(4)) {
                    *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                }
            }
            Ok(w)
        };
        let weights = read("model")?;
        let per_group = weights.tensors().len();
        let optimizer = match meta.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: read("adam.m")?,
                v: read("adam.v")?,
            }),
            None => None,
        };
        let expected = per_group * if optimizer.is_some() { 3 } else { 1 };
        if st.len() != expected {
            return Err(bad(format!("checkpoint holds {} tensors, expected {expected}", st.len())));
        }
        if !weights.all_finite() {
            return Err(bad("checkpoint weights are not finite"));
        }
        let denoiser = Denoiser {
            config: meta.denoiser,
            weights,
        };
        let schedule = make_schedule(meta.schedule, meta.timesteps)?;
        let model = UniModel::new(denoiser, schedule, meta.normalization, meta.codec, meta.fps)?;
        Ok(Checkpoint {
            model,
            optimizer,
            lineage: meta.lineage,
            train: meta.train,
        })
    }

    /// Writes atomically and returns the content hash of the written bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(content_hash(&bytes))
    }

    /// Loads a checkpoint and its content hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Checkpoint::from_bytes(&bytes)?, content_hash(&bytes)))
    }
}
