use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::eval::{EmbedderConfig, EvalConfig};
use crate::pipeline::{ModelConfig, TrainConfig};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "TWINSTEP_CONFIG";
/// Name of the resolved config echoed into every output directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub embedder: EmbedderConfig,
    pub eval: EvalConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::usage(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::usage(format!("malformed override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::usage(format!("{key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the config file, then each `--set` override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::usage(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Table =
                toml::from_str(&text).map_err(|e| Error::usage(format!("{}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::usage(format!("config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = [
            "train.steps=12".to_string(),
            "sampler.mode=\"m2t\"".to_string(),
            "sampler.guidance_scale=1.5".to_string(),
            "paths.run_dir=out/run".to_string(),
            "train.steps=13".to_string(),
        ];
        let cfg = RunConfig::resolve(None, &sets).unwrap();
        assert_eq!(cfg.train.steps, 13);
        assert_eq!(cfg.sampler.mode, crate::diffusion::TaskMode::M2t);
        assert_eq!(cfg.sampler.guidance_scale, 1.5);
        assert_eq!(cfg.paths.run_dir, PathBuf::from("out/run"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.stepz=3", "nosuch.key=1", "train=4"] {
            let err = RunConfig::resolve(None, &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, Error::Usage(_)), "{bad}: {err:?}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[model]\nmodel_dim = 32\nwidth = 3\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &[]).is_err());
        fs::write(&path, "[model]\nmodel_dim = 32\n").unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap().model.model_dim, 32);
    }
}
