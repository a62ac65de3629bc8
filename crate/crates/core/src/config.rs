//! Run configuration and the manifest written next to every run's outputs.
//!
//! Configuration files are TOML restricted to dotted sections, e.g.
//!
//! ```toml
//! numeric.checked = true
//! contrast.tau = 0.5
//!
//! [train]
//! epochs = 50
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrast::ContrastConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::stfd::StfdConfig;
use crate::train::TrainConfig;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericConfig {
    /// Reject NaN/Inf intermediates and out-of-domain inputs.
    pub checked: bool,
}

impl Default for NumericConfig {
    fn default() -> Self {
        Self { checked: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Held-out set for per-epoch accuracy; the training set when absent.
    pub eval_path: Option<PathBuf>,
    /// Resample every sequence to this many frames on load.
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub numeric: NumericConfig,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub stfd: StfdConfig,
    pub contrast: ContrastConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(Error::Config)?;
        if self.train.framework_enabled {
            self.stfd.validate(self.model.channels).map_err(Error::Config)?;
        }
        self.contrast.validate().map_err(Error::Config)?;
        self.train.validate().map_err(Error::Config)?;
        if let Some(f) = self.data.frames {
            if f < 2 {
                return Err(Error::Config(format!("data.frames {f} must be >= 2")));
            }
        }
        Ok(())
    }
}

/// Resolved configuration plus artifact names, sufficient to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Artifact role → file name relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            command: command.to_string(),
            seed: config.train.seed,
            config,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::LossForm;

    #[test]
    fn dotted_keys_and_sections() {
        let cfg = RunConfig::from_toml_str(
            "numeric.checked = false\ncontrast.tau = 0.5\ncontrast.loss_form = \"literal\"\n[train]\nepochs = 3\n",
        )
        .unwrap();
        assert!(!cfg.numeric.checked);
        assert_eq!(cfg.contrast.tau, 0.5);
        assert_eq!(cfg.contrast.loss_form, LossForm::Literal);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.stfd, StfdConfig::default());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::from_toml_str("[train]\nepochs = 3\nbatch_size = = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = RunConfig::from_toml_str("[train]\nepoch = 3\n").unwrap_err().to_string();
        assert!(err.contains("unknown field"), "{err}");
    }

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stfd.embedding_dim, 256);
        assert_eq!(cfg.stfd.reduction, 8);
        assert_eq!((cfg.contrast.n_pos_hard, cfg.contrast.n_neg_hard, cfg.contrast.n_neg_rand), (128, 512, 512));
        assert_eq!((cfg.train.lambda_ce, cfg.train.lambda_spa, cfg.train.lambda_tem), (1.0, 1.0, 1.0));
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.contrast.tau = 0.5;
        cfg.data.path = Some("d.jsonl".into());
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
