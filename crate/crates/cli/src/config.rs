//! The experiment config file. Every section is optional; missing keys take
//! library defaults, and command-line flags override both.
//!
//! ```toml
//! [market]      # synthetic generator (gen-market)
//! n_days = 250
//! generator = "sabr_mixture"
//!
//! [preprocess]  # quote filters applied when a bundle is loaded
//! max_rel_spread = 0.5
//!
//! [priors]      # SABR prior surfaces (build-priors)
//! beta = 1.0
//! k_step = 0.025
//!
//! [split]       # test tail and random validation hold-out
//! test_days = 50
//! val_fraction = 0.1
//!
//! [model]       # network shape for fresh models
//! d_r = 128
//!
//! [train.pretrain]   # per-stage overrides of the training defaults
//! lr = 5e-5
//!
//! [eval]
//! n_context = 100
//! n_list = [10, 25, 50, 100, 200]
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use volnp_core::market::{PreprocessConfig, SyntheticMarketConfig};
use volnp_core::sabr::GridConfig;
use volnp_core::train::{SplitConfig, Stage, TrainConfig};
use volnp_core::volnp::ModelConfig;

use crate::error::{CliError, CliResult, IoContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub beta: f64,
    #[serde(flatten)]
    pub grid: GridConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { beta: 1.0, grid: GridConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_context: usize,
    pub seed: u64,
    pub n_list: Vec<usize>,
    pub k_edges: Vec<f64>,
    pub tau_edges: Vec<f64>,
    /// Log-moneyness grid `[lo, hi, step]` for arbitrage checks.
    pub arb_k_grid: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_context: 100,
            seed: 0,
            n_list: vec![10, 25, 50, 100, 200],
            k_edges: vec![-0.8, -0.4, -0.2, -0.05, 0.05, 0.2, 0.4, 0.8],
            tau_edges: vec![0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 3.0],
            arb_k_grid: [-0.5, 0.5, 0.025],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub pretrain: toml::Table,
    pub finetune: toml::Table,
    pub base: toml::Table,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub market: SyntheticMarketConfig,
    pub preprocess: PreprocessConfig,
    pub priors: PriorConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        if !path.exists() {
            return Err(CliError::config(format!("config file {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Stage defaults with the file's `[train.<stage>]` table merged on top.
    pub fn train_config(&self, stage: Stage) -> CliResult<TrainConfig> {
        let table = match stage {
            Stage::Pretrain => &self.train.pretrain,
            Stage::Finetune => &self.train.finetune,
            Stage::Base => &self.train.base,
        };
        merge_onto(&TrainConfig::for_stage(stage), table).map_err(|e| CliError::config(format!("[train.{}]: {e}", stage_name(stage))))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

pub fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
        Stage::Base => "base",
    }
}

fn merge_onto<T: Serialize + DeserializeOwned>(base: &T, overrides: &toml::Table) -> Result<T, String> {
    let mut value = toml::Table::try_from(base).map_err(|e| e.to_string())?;
    for (k, v) in overrides {
        if !value.contains_key(k) && k != "max_targets" {
            return Err(format!("unknown key {k:?}"));
        }
        value.insert(k.clone(), v.clone());
    }
    toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, FileConfig::default());
        assert_eq!(cfg.train_config(Stage::Finetune).unwrap(), TrainConfig::for_stage(Stage::Finetune));
    }

    #[test]
    fn stage_tables_override_defaults() {
        let cfg: FileConfig = toml::from_str("[train.pretrain]\nlr = 0.001\nmax_epochs = 3\nmax_targets = 64\n[model]\nd_r = 32").unwrap();
        let t = cfg.train_config(Stage::Pretrain).unwrap();
        assert_eq!((t.lr, t.max_epochs, t.max_targets, t.batch_tasks), (1e-3, 3, Some(64), 16));
        assert_eq!(cfg.model.d_r, 32);
        assert_eq!(cfg.model.heads, 4);
        let base = cfg.train_config(Stage::Base).unwrap();
        assert_eq!(base.max_targets, None);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[trian]\nlr = 1").is_err());
        let cfg: FileConfig = toml::from_str("[train.base]\nlearning_rate = 1").unwrap();
        assert!(cfg.train_config(Stage::Base).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = FileConfig::default();
        cfg.eval.n_context = 42;
        cfg.train.base.insert("lr".into(), toml::Value::Float(0.01));
        assert_eq!(toml::from_str::<FileConfig>(&cfg.to_toml()).unwrap(), cfg);
    }
}
