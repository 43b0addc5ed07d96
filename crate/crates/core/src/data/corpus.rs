use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::{generate_sequence, Action, GeneratorConfig, ScriptSampler, GENERATOR_VERSION};
use super::io::DatasetManifest;
use super::types::{feature, DatasetRecord};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Sizes and seeds of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub scripts: ScriptSampler,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train: 2000,
            val: 200,
            test: 200,
            seed: 0,
            generator: GeneratorConfig::default(),
            scripts: ScriptSampler::default(),
        }
    }
}

impl CorpusConfig {
    pub fn size(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train),
            "val" => Ok(self.val),
            "test" => Ok(self.test),
            other => Err(Error::usage(format!("unknown split {other:?}"))),
        }
    }
}

/// Generates one split. Record ids are `<split>-<index>`, so splits never share ids,
/// and each split draws from its own random stream.
pub fn generate_split(config: &CorpusConfig, split: &str) -> Result<(DatasetManifest, Vec<DatasetRecord>)> {
    let size = config.size(split)?;
    let stream = SPLITS.iter().position(|s| *s == split).expect("known split") as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut records = Vec::with_capacity(size);
    for i in 0..size {
        let script = config.scripts.sample(&mut rng, config.generator.max_frames);
        let seed: u64 = rng.gen();
        let (motion, track, text) = generate_sequence(&script, seed, &config.generator)?;
        records.push(DatasetRecord {
            id: format!("{split}-{i:05}"),
            motion,
            track: Some(track),
            global_text: Some(text),
        });
    }
    let manifest = DatasetManifest {
        name: split.to_string(),
        d_x: feature::DIM,
        fps: config.generator.fps,
        size,
        label_vocabulary: Action::vocabulary(),
        generator_version: GENERATOR_VERSION,
        seed: config.seed,
    };
    Ok((manifest, records))
}
