//! Run configuration: a JSON key/value document with flag overrides; flags
//! win over file values.

use std::path::Path;

use serde::Deserialize;

use a2snas_core::data::SplitSpec;
use a2snas_core::search::SearchConfig;

use crate::Failure;

/// Optional fields as they appear in the config file. Unknown keys are
/// rejected by name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub patch_size: Option<usize>,
    pub stem_channels: Option<usize>,
    pub search_epochs: Option<usize>,
    pub retrain_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub w_lr: Option<f64>,
    pub w_lr_decay: Option<f64>,
    pub arch_lr: Option<f64>,
    pub arch_momentum: Option<f64>,
    pub lambda: Option<f64>,
    pub search_total: Option<usize>,
    pub search_train_fraction: Option<f64>,
    pub eval_train_per_class: Option<usize>,
    pub eval_val_per_class: Option<usize>,
}

/// Flag-level overrides shared by the run subcommands.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Base seed for every randomized procedure (mandatory here or in the
    /// config file; there is no wall-clock seeding).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Spatial patch size (odd).
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Channel width of the first stage.
    #[arg(long)]
    pub stem_channels: Option<usize>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub search_total: Option<usize>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub stem_channels: usize,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_lr_decay: f64,
    pub arch_lr: f64,
    pub arch_momentum: f64,
    pub lambda: f64,
    pub search_total: usize,
    pub search_train_fraction: f64,
    pub eval_train_per_class: usize,
    pub eval_val_per_class: usize,
}

impl RunConfig {
    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> Result<RunConfig, Failure> {
        let file = match path {
            None => FileConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::data(format!("config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
            }
        };
        let seed = flags
            .seed
            .or(file.seed)
            .ok_or_else(|| Failure::usage("missing config key: seed (set it in the config file or pass --seed)"))?;
        let cfg = RunConfig {
            seed,
            patch_size: flags.patch_size.or(file.patch_size).unwrap_or(19),
            stem_channels: flags.stem_channels.or(file.stem_channels).unwrap_or(16),
            search_epochs: flags.search_epochs.or(file.search_epochs).unwrap_or(50),
            retrain_epochs: flags.retrain_epochs.or(file.retrain_epochs).unwrap_or(100),
            batch_size: flags.batch_size.or(file.batch_size).unwrap_or(16),
            w_lr: file.w_lr.unwrap_or(1e-3),
            w_lr_decay: file.w_lr_decay.unwrap_or(0.97),
            arch_lr: file.arch_lr.unwrap_or(0.01),
            arch_momentum: file.arch_momentum.unwrap_or(0.9),
            lambda: file.lambda.unwrap_or(1.0),
            search_total: flags.search_total.or(file.search_total).unwrap_or(610),
            search_train_fraction: file.search_train_fraction.unwrap_or(0.5),
            eval_train_per_class: file.eval_train_per_class.unwrap_or(50),
            eval_val_per_class: file.eval_val_per_class.unwrap_or(30),
        };
        cfg.search(Some(cfg.search_epochs))
            .validate()
            .map_err(|e| Failure::usage(e.to_string()))?;
        if cfg.patch_size.is_multiple_of(2) {
            return Err(Failure::usage(format!(
                "patch_size must be odd, got {}",
                cfg.patch_size
            )));
        }
        Ok(cfg)
    }

    pub fn search(&self, epochs: Option<usize>) -> SearchConfig {
        SearchConfig {
            search_epochs: epochs.unwrap_or(self.search_epochs),
            retrain_epochs: self.retrain_epochs,
            batch_size: self.batch_size,
            w_lr: self.w_lr,
            w_lr_decay: self.w_lr_decay,
            arch_lr: self.arch_lr,
            arch_momentum: self.arch_momentum,
            lambda: self.lambda,
            seed: self.seed,
        }
    }

    pub fn search_split(&self) -> SplitSpec {
        SplitSpec::TotalBudget {
            total: self.search_total,
            train_fraction: self.search_train_fraction,
        }
    }

    pub fn eval_split(&self) -> SplitSpec {
        SplitSpec::PerClass {
            train: self.eval_train_per_class,
            val: self.eval_val_per_class,
        }
    }
}
