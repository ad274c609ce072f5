//! Run configuration: every setting of a run in one versioned TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::Budget;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::generation::GenerateOptions;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::vq::FitOptions;

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: SyntheticDataset,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Images used to fit the codebook.
    pub fit_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: SyntheticDataset::default(),
            train_samples: 4096,
            val_samples: 256,
            fit_images: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub run_id: String,
    /// Parent of the run directory.
    pub output_dir: PathBuf,
    /// Model initialization and generation seed.
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateOptions,
    pub data: DataConfig,
    pub vq: FitOptions,
    pub ablation: Budget,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            run_id: "default".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            train: TrainConfig {
                batch_size: 16,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            generate: GenerateOptions::default(),
            data: DataConfig::default(),
            vq: FitOptions::default(),
            ablation: Budget::default(),
        }
    }
}

/// Sets `dotted.key = value` in a TOML table; `value` is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(v) = table.get("version").and_then(toml::Value::as_integer) {
            if v != RUN_CONFIG_VERSION as i64 {
                return Err(Error::Version {
                    found: v as u32,
                    expected: RUN_CONFIG_VERSION,
                });
            }
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: RUN_CONFIG_VERSION,
            });
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(Error::Config(format!(
                "run_id {:?} is not a plain directory name",
                self.run_id
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.dataset.validate()?;
        if self.data.dataset.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model expects {}",
                self.data.dataset.num_classes, self.model.num_classes
            )));
        }
        if self.data.dataset.grid != self.model.grid_height
            || self.data.dataset.grid != self.model.grid_width
        {
            return Err(Error::Config(
                "dataset grid does not match the model grid".into(),
            ));
        }
        if self.vq.k != self.model.codebook_size || self.vq.patch_size != self.data.dataset.patch {
            return Err(Error::Config(
                "vq.k / vq.patch_size must match model.codebook_size / dataset patch".into(),
            ));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Creates `config.toml`, `checkpoints/`, `images/` and `reports/`.
    pub fn prepare_run_dir(&self) -> Result<PathBuf> {
        let dir = self.run_dir();
        for sub in ["checkpoints", "images", "reports"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(dir)
    }
}
