//! Versioned JSON experiment definitions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::disturbance::DisturbanceKind;
use crate::error::{Error, Result};
use crate::harness::data::{load_cifar10, load_mnist, Splits, SyntheticSpec};
use crate::pipeline::{BasisNet, LightweightSpec};
use crate::synthesis::{BasisBank, BasisInit, SynthesisConfig};
use crate::training::{LossConfig, TrainSchedule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        eval_limit: Option<usize>,
    },
    Cifar10 {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        eval_limit: Option<usize>,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DatasetConfig::Mnist {
                path,
                train_limit,
                eval_limit,
            } => load_mnist(path, *train_limit, *eval_limit),
            DatasetConfig::Cifar10 {
                path,
                train_limit,
                eval_limit,
            } => load_cifar10(path, *train_limit, *eval_limit),
            DatasetConfig::Synthetic { spec } => spec.generate(),
        }
    }
}

/// Half-open layer interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub backbone: BackboneSpec,
    pub num_bases: usize,
    /// Layers holding a single kernel instead of `num_bases` bases.
    #[serde(default)]
    pub shared: Vec<LayerRange>,
    #[serde(default)]
    pub basis_init: BasisInit,
}

impl BankConfig {
    pub fn share_mask(&self) -> Result<Vec<bool>> {
        let k = self.backbone.num_layers();
        let mut mask = vec![false; k];
        for r in &self.shared {
            if r.start >= r.end || r.end > k {
                return Err(Error::Config(format!(
                    "shared range [{}, {}) invalid for {k} layers",
                    r.start, r.end
                )));
            }
            mask[r.start..r.end].iter_mut().for_each(|m| *m = true);
        }
        Ok(mask)
    }
}

fn default_thresholds() -> Vec<f64> {
    vec![0.0, 0.5, 0.7, 0.9, 1.01]
}

fn default_threshold() -> f64 {
    0.7
}

fn default_disturbances() -> Vec<String> {
    ["correct", "top1", "mean", "uniform", "shuffled"].map(String::from).to_vec()
}

fn default_shuffle_seeds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Threshold used for the skip-rate metric during training and for `eval`.
    #[serde(default = "default_threshold")]
    pub default_threshold: f64,
    #[serde(default = "default_disturbances")]
    pub disturbances: Vec<String>,
    #[serde(default = "default_shuffle_seeds")]
    pub shuffle_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: default_thresholds(),
            default_threshold: default_threshold(),
            disturbances: default_disturbances(),
            shuffle_seeds: default_shuffle_seeds(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub lm: LightweightSpec,
    pub bank: BankConfig,
    pub synthesis: SynthesisConfig,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.lm.trunk.validate()?;
        self.bank.backbone.validate()?;
        if self.bank.num_bases == 0 {
            return Err(Error::Config("num_bases must be positive".into()));
        }
        self.bank.share_mask()?;
        self.synthesis.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.eval.thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::Config("thresholds must be non-negative numbers".into()));
        }
        for name in &self.eval.disturbances {
            DisturbanceKind::parse(name, 0).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let DatasetConfig::Synthetic { spec } = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Mnist { path, .. } | DatasetConfig::Cifar10 { path, .. } if !path.is_dir() => {
                Err(Error::Config(format!("dataset path {} does not exist", path.display())))
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical (compact) JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Freshly initialized model for this configuration.
    pub fn build_model(&self) -> Result<BasisNet> {
        let mask = self.bank.share_mask()?;
        let bank = BasisBank::with_init(
            &self.bank.backbone,
            self.bank.num_bases,
            &mask,
            self.seed,
            self.bank.basis_init,
        )?;
        BasisNet::new(&self.lm, bank, self.synthesis.clone(), self.seed.wrapping_add(1))
    }
}
