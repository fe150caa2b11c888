//! Run configuration: one TOML document covering model, training and data
//! paths. Every artifact a run writes carries this document verbatim.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Labeled synthetic images (train split).
    pub source_manifest: Option<PathBuf>,
    /// Real images; transcripts are only read in supervised adaptation.
    pub target_manifest: Option<PathBuf>,
    /// Labeled real images used for validation (val split, else test split).
    pub val_manifest: Option<PathBuf>,
    /// Charset file; defaults to the one stored in the init checkpoint or
    /// `charset.json` next to the source manifest.
    pub charset: Option<PathBuf>,
    /// Use only the first `n` target images.
    pub target_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Start from these weights (and optimizer moments) instead of a fresh model.
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            init_checkpoint: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every section plus the manifests the mode needs. Runs before
    /// any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        let need = |p: &Option<PathBuf>, what: &str| {
            if p.is_none() {
                Err(Error::Config(format!(
                    "mode {:?} requires a {what} manifest",
                    self.train.mode
                )))
            } else {
                Ok(())
            }
        };
        match self.train.mode {
            TrainMode::SourceOnly => need(&d.source_manifest, "source")?,
            TrainMode::UnsupAdapt => {
                need(&d.source_manifest, "source")?;
                need(&d.target_manifest, "target")?;
            }
            TrainMode::SupAdapt => need(&d.target_manifest, "target")?,
        }
        if d.target_limit == Some(0) {
            return Err(Error::Config("target_limit must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.mode = TrainMode::UnsupAdapt;
        cfg.train.max_steps = Some(12);
        cfg.data.source_manifest = Some("a/manifest.jsonl".into());
        cfg.data.target_manifest = Some("b/manifest.jsonl".into());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg = RunConfig::from_toml("[train]\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nlr = 1.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn adaptation_needs_a_target_manifest() {
        let mut cfg = RunConfig::default();
        cfg.train.mode = TrainMode::UnsupAdapt;
        cfg.data.source_manifest = Some("s.jsonl".into());
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation(), "{err}");
        assert!(err.to_string().contains("target"));
    }
}
