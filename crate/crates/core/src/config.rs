//! Run configuration: a TOML file merged with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IrlTrainConfig, ModelConfig, SampleOptions};
use crate::refiner::RefineTrainConfig;
use crate::scene::GeneratorParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of scenario JSON files.
    pub corpus: Option<PathBuf>,
    /// Output directory for checkpoints, logs, predictions and reports.
    pub out: Option<PathBuf>,
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
    /// Record wall-clock timings in outputs. Off by default so outputs are byte-stable.
    pub timing: bool,
    pub model: ModelConfig,
    pub sample: SampleOptions,
    pub irl: IrlTrainConfig,
    pub refine: RefineTrainConfig,
    pub generator: GeneratorParams,
}

/// Parse `key=value` where the value is a TOML literal; bare words are taken
/// as strings so `paths.out=runs/a` works without quoting.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let v = v.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

fn apply(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = root;
    for p in parts {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// File text (if any) with `overrides` applied on top, in order.
    pub fn resolve(file: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = match file {
            Some(text) => toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?,
            None => Default::default(),
        };
        for (k, v) in overrides {
            apply(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.generator.validate()?;
        if self.sample.num_plans == 0 || self.sample.num_modes == 0 {
            return Err(Error::Config(
                "sample.num_plans and sample.num_modes must be positive".into(),
            ));
        }
        if self.sample.num_modes > self.sample.num_plans {
            return Err(Error::Config(format!(
                "sample.num_modes {} exceeds sample.num_plans {}",
                self.sample.num_modes, self.sample.num_plans
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
    }
}
