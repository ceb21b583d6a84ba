//! Experiment configuration.
//!
//! A config file is flat TOML with snake_case keys. Every key is also a CLI
//! flag in kebab-case (`local_epochs` becomes `--local-epochs`). Values are
//! layered: built-in defaults, then the file, then flags, then the
//! `KDIA_SEED` environment variable, which replaces the seed list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BlobSpec;
use crate::error::{Error, Result};
use crate::generator::GenTrainConfig;
use crate::ledger::WeightingMode;
use crate::local::{lambda_gen_for_beta, TrainConfig};

pub const SEED_ENV: &str = "KDIA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    pub separation: f64,
    pub test_fraction: f64,
}

impl DataConfig {
    pub fn blob_spec(&self, seed: u64) -> BlobSpec {
        BlobSpec {
            n_classes: self.n_classes,
            samples_per_class: self.samples_per_class,
            d_in: self.d_in,
            spread: self.spread,
            separation: self.separation,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub gen_hidden_dim: usize,
}

impl ModelConfig {
    /// Task model widths `d_in -> hidden -> feature -> classes`; the first
    /// two layers form the extractor.
    pub fn task_widths(&self, d_in: usize, n_classes: usize) -> [usize; 4] {
        [d_in, self.hidden_dim, self.feature_dim, n_classes]
    }

    pub const TASK_SPLIT: usize = 2;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub n_clients: usize,
    pub sample_ratio: f64,
    pub beta: f64,
    pub rounds: usize,
    pub mode: WeightingMode,
    pub part_floor: f64,
    pub train: TrainConfig,
    pub gen: GenTrainConfig,
    pub seeds: Vec<u64>,
    pub disable_kd: bool,
    pub disable_gen: bool,
    pub parallel: bool,
    /// Write model checkpoints every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ConfigArgs::default().resolve().expect("defaults are valid")
    }
}

/// Every configuration key, all optional. Doubles as the TOML schema and the
/// CLI flag set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigArgs {
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub d_in: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub gen_hidden_dim: Option<usize>,
    #[arg(long)]
    pub n_clients: Option<usize>,
    #[arg(long)]
    pub sample_ratio: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub part_floor: Option<f64>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lambda_kd: Option<f64>,
    #[arg(long)]
    pub lambda_gen: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gen_epochs: Option<usize>,
    #[arg(long)]
    pub gen_batches: Option<usize>,
    #[arg(long)]
    pub gen_batch_size: Option<usize>,
    #[arg(long)]
    pub noise_dim: Option<usize>,
    #[arg(long)]
    pub diversity_weight: Option<f64>,
    #[arg(long)]
    pub diversity_epsilon: Option<f64>,
    #[arg(long)]
    pub gen_lr: Option<f64>,
    #[arg(long)]
    pub gen_weight_decay: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub disable_kd: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub disable_gen: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ensemble_mean: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub syn_per_batch: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub kd_tau_squared: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub parallel: Option<bool>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),* $(,)?) => {
        ConfigArgs { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ConfigArgs {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match msg.split('`').nth(1) {
                Some(key) if msg.starts_with("unknown field") => Error::key(key, "unknown key"),
                _ => Error::Configuration(msg),
            }
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Values set in `top` win over `self`.
    pub fn overlay(self, top: ConfigArgs) -> ConfigArgs {
        let base = self;
        overlay!(
            base, top, n_classes, samples_per_class, d_in, spread, separation, test_fraction, hidden_dim,
            feature_dim, gen_hidden_dim, n_clients, sample_ratio, beta, rounds, mode, part_floor, local_epochs,
            batch_size, lr, momentum, weight_decay, lambda_kd, lambda_gen, tau, gen_epochs, gen_batches,
            gen_batch_size, noise_dim, diversity_weight, diversity_epsilon, gen_lr, gen_weight_decay, seeds,
            disable_kd, disable_gen, ensemble_mean, syn_per_batch, kd_tau_squared, parallel, checkpoint_every,
            checkpoint_dir,
        )
    }

    /// Apply defaults and validate.
    pub fn resolve(self) -> Result<ExperimentConfig> {
        let train_d = TrainConfig::default();
        let gen_d = GenTrainConfig::default();
        let beta = self.beta.unwrap_or(0.5);
        let mode = match &self.mode {
            Some(m) => m.parse()?,
            None => WeightingMode::TriGm,
        };
        let cfg = ExperimentConfig {
            data: DataConfig {
                n_classes: self.n_classes.unwrap_or(10),
                samples_per_class: self.samples_per_class.unwrap_or(500),
                d_in: self.d_in.unwrap_or(32),
                spread: self.spread.unwrap_or(1.0),
                separation: self.separation.unwrap_or(3.0),
                test_fraction: self.test_fraction.unwrap_or(0.2),
            },
            model: ModelConfig {
                hidden_dim: self.hidden_dim.unwrap_or(128),
                feature_dim: self.feature_dim.unwrap_or(64),
                gen_hidden_dim: self.gen_hidden_dim.unwrap_or(128),
            },
            n_clients: self.n_clients.unwrap_or(100),
            sample_ratio: self.sample_ratio.unwrap_or(0.1),
            beta,
            rounds: self.rounds.unwrap_or(200),
            mode,
            part_floor: self.part_floor.unwrap_or(0.0),
            train: TrainConfig {
                epochs: self.local_epochs.unwrap_or(train_d.epochs),
                batch_size: self.batch_size.unwrap_or(train_d.batch_size),
                learning_rate: self.lr.unwrap_or(train_d.learning_rate),
                momentum: self.momentum.unwrap_or(train_d.momentum),
                weight_decay: self.weight_decay.unwrap_or(train_d.weight_decay),
                lambda_kd: self.lambda_kd.unwrap_or(train_d.lambda_kd),
                lambda_gen: self.lambda_gen.unwrap_or_else(|| lambda_gen_for_beta(beta)),
                tau: self.tau.unwrap_or(train_d.tau),
                kd_tau_squared: self.kd_tau_squared.unwrap_or(false),
                syn_per_batch: self.syn_per_batch.unwrap_or(false),
            },
            gen: GenTrainConfig {
                epochs: self.gen_epochs.unwrap_or(gen_d.epochs),
                batches: self.gen_batches.unwrap_or(gen_d.batches),
                batch_size: self.gen_batch_size.unwrap_or(gen_d.batch_size),
                noise_dim: self.noise_dim.unwrap_or(gen_d.noise_dim),
                diversity_weight: self.diversity_weight.unwrap_or(gen_d.diversity_weight),
                diversity_epsilon: self.diversity_epsilon.unwrap_or(gen_d.diversity_epsilon),
                learning_rate: self.gen_lr.unwrap_or(gen_d.learning_rate),
                weight_decay: self.gen_weight_decay.unwrap_or(gen_d.weight_decay),
                ensemble_mean: self.ensemble_mean.unwrap_or(false),
            },
            seeds: self.seeds.unwrap_or_else(|| vec![0]),
            disable_kd: self.disable_kd.unwrap_or(false),
            disable_gen: self.disable_gen.unwrap_or(false),
            parallel: self.parallel.unwrap_or(false),
            checkpoint_every: self.checkpoint_every.unwrap_or(0),
            checkpoint_dir: self.checkpoint_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let positive = [
            ("n_classes", d.n_classes),
            ("samples_per_class", d.samples_per_class),
            ("d_in", d.d_in),
            ("hidden_dim", self.model.hidden_dim),
            ("feature_dim", self.model.feature_dim),
            ("gen_hidden_dim", self.model.gen_hidden_dim),
            ("n_clients", self.n_clients),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::key(key, "must be at least 1"));
            }
        }
        if d.n_classes < 2 {
            return Err(Error::key("n_classes", "need at least 2 classes"));
        }
        if !(d.spread > 0.0 && d.spread.is_finite()) {
            return Err(Error::key("spread", "must be positive"));
        }
        if !(d.separation >= 0.0 && d.separation.is_finite()) {
            return Err(Error::key("separation", "must be non-negative"));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::key("test_fraction", "must lie in (0, 1)"));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::key("sample_ratio", "must lie in (0, 1]"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::key("beta", "must be positive"));
        }
        if !(self.part_floor >= 0.0 && self.part_floor.is_finite()) {
            return Err(Error::key("part_floor", "must be non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::key("seeds", "need at least one seed"));
        }
        let train_samples = self.train_samples();
        if train_samples < self.n_clients {
            return Err(Error::key(
                "n_clients",
                format!("{} clients but only {train_samples} training samples", self.n_clients),
            ));
        }
        if self.train.epochs == 0 {
            return Err(Error::key("local_epochs", "must be at least 1"));
        }
        self.train.validate()?;
        self.gen.validate()?;
        Ok(())
    }

    /// Training samples left after the stratified test split.
    pub fn train_samples(&self) -> usize {
        let per_class_test = (self.data.test_fraction * self.data.samples_per_class as f64).round() as usize;
        self.data.n_classes * self.data.samples_per_class.saturating_sub(per_class_test)
    }

    /// Clients selected per round: `max(1, round_half_up(N * C))`.
    pub fn clients_per_round(&self) -> usize {
        crate::orchestrator::clients_per_round(self.n_clients, self.sample_ratio)
    }

    pub fn use_teacher(&self) -> bool {
        !self.disable_kd && self.train.lambda_kd > 0.0
    }

    pub fn use_generator(&self) -> bool {
        !self.disable_gen && self.train.lambda_gen > 0.0
    }

    /// The flat key/value form of this config.
    pub fn to_args(&self) -> ConfigArgs {
        ConfigArgs {
            n_classes: Some(self.data.n_classes),
            samples_per_class: Some(self.data.samples_per_class),
            d_in: Some(self.data.d_in),
            spread: Some(self.data.spread),
            separation: Some(self.data.separation),
            test_fraction: Some(self.data.test_fraction),
            hidden_dim: Some(self.model.hidden_dim),
            feature_dim: Some(self.model.feature_dim),
            gen_hidden_dim: Some(self.model.gen_hidden_dim),
            n_clients: Some(self.n_clients),
            sample_ratio: Some(self.sample_ratio),
            beta: Some(self.beta),
            rounds: Some(self.rounds),
            mode: Some(self.mode.to_string()),
            part_floor: Some(self.part_floor),
            local_epochs: Some(self.train.epochs),
            batch_size: Some(self.train.batch_size),
            lr: Some(self.train.learning_rate),
            momentum: Some(self.train.momentum),
            weight_decay: Some(self.train.weight_decay),
            lambda_kd: Some(self.train.lambda_kd),
            lambda_gen: Some(self.train.lambda_gen),
            tau: Some(self.train.tau),
            gen_epochs: Some(self.gen.epochs),
            gen_batches: Some(self.gen.batches),
            gen_batch_size: Some(self.gen.batch_size),
            noise_dim: Some(self.gen.noise_dim),
            diversity_weight: Some(self.gen.diversity_weight),
            diversity_epsilon: Some(self.gen.diversity_epsilon),
            gen_lr: Some(self.gen.learning_rate),
            gen_weight_decay: Some(self.gen.weight_decay),
            seeds: Some(self.seeds.clone()),
            disable_kd: Some(self.disable_kd),
            disable_gen: Some(self.disable_gen),
            ensemble_mean: Some(self.gen.ensemble_mean),
            syn_per_batch: Some(self.train.syn_per_batch),
            kd_tau_squared: Some(self.train.kd_tau_squared),
            parallel: Some(self.parallel),
            checkpoint_every: Some(self.checkpoint_every),
            checkpoint_dir: self.checkpoint_dir.clone(),
        }
    }
}

/// Resolve a configuration from an optional file and flag overrides, then
/// apply `KDIA_SEED` if it is set.
pub fn parse_config(path: Option<&Path>, flags: ConfigArgs) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ConfigArgs::from_file(p)?,
        None => ConfigArgs::default(),
    };
    let mut merged = base.overlay(flags);
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed = v
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::key(SEED_ENV, format!("not an unsigned integer: `{v}`")))?;
        merged.seeds = Some(vec![seed]);
    }
    merged.resolve()
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    ConfigArgs::from_toml(text)?.resolve()
}
