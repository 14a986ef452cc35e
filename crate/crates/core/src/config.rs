//! Run configuration files.
//!
//! ```toml
//! out = "runs/parity"
//!
//! [data]
//! source = "parity"
//! k = 5
//!
//! [op]
//! kind = "tensor_fusion"
//! dim = 16
//!
//! [train]
//! lr = 0.001
//! lambda_assoc = 0.1
//!
//! [reg]
//! num_samples = 16
//! ```
//!
//! Unknown keys anywhere are rejected.

use crate::datasets::{gen_parity, gen_rules, gen_toy_kg, load_rules, load_tsv, RuleSet, TripleDataset};
use crate::error::{NtsError, Result};
use crate::objectives::TrainConfig;
use crate::ops::TernaryOpSpec;
use crate::regularizers::ResidualSampleConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Parity {
        k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_per_class: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    Rules {
        n_atoms: usize,
        n_rules: usize,
        #[serde(default)]
        seed: u64,
    },
    ToyKg {
        #[serde(default)]
        seed: u64,
    },
    Tsv {
        dir: PathBuf,
    },
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NtsError::Config(m));
        match *self {
            DataConfig::Parity { k, n_per_class, .. } => {
                if k < 2 {
                    return bad(format!("data.k must be at least 2, got {k}"));
                }
                if n_per_class == Some(0) {
                    return bad("data.n_per_class must be positive".into());
                }
            }
            DataConfig::Rules { n_atoms, n_rules, .. } => {
                if n_atoms < 3 {
                    return bad(format!("data.n_atoms must be at least 3, got {n_atoms}"));
                }
                if n_rules == 0 || n_rules > n_atoms * (n_atoms - 1) {
                    return bad(format!("data.n_rules must be in 1..={}", n_atoms * (n_atoms - 1)));
                }
            }
            DataConfig::ToyKg { .. } | DataConfig::Tsv { .. } => {}
        }
        Ok(())
    }

    /// Builds or loads the dataset, plus the rule base when there is one.
    pub fn load(&self) -> Result<(TripleDataset, Option<RuleSet>)> {
        match self {
            DataConfig::Parity { k, n_per_class, seed } => Ok((gen_parity(*k, *n_per_class, *seed)?, None)),
            DataConfig::Rules { n_atoms, n_rules, seed } => {
                let (ds, rules) = gen_rules(*n_atoms, *n_rules, *seed)?;
                Ok((ds, Some(rules)))
            }
            DataConfig::ToyKg { seed } => Ok((gen_toy_kg(*seed)?, None)),
            DataConfig::Tsv { dir } => {
                let ds = load_tsv(dir)?;
                let rules = load_rules(&ds, dir)?;
                Ok((ds, rules))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub op: TernaryOpSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reg: ResidualSampleConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| NtsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NtsError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.op.validate()?;
        self.train.validate()?;
        self.reg.validate()
    }

    /// Replaces both the training and the residual-sampling seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.reg.seed = seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NtsError::Config(e.to_string()))
    }
}
