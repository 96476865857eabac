//! Experiment document: `network`, `budget`, `train`, `data`, `mapping`.
//!
//! The grammar and every default is documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    BudgetSpec, Combiner, NetworkSpec, RawNetwork, Upsampler, DEFAULT_EMB_DIM,
    DEFAULT_MASK_WINDOW, DEFAULT_TEMPLATES,
};
use crate::error::{Error, Result};

/// How the budget was stated in the document.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetAmount {
    Absolute(usize),
    /// Fraction of `Σ|w_i|`, floored.
    Fraction(f64),
}

impl BudgetAmount {
    pub fn resolve(self, total_weights: usize) -> usize {
        match self {
            BudgetAmount::Absolute(n) => n,
            BudgetAmount::Fraction(f) => (f * total_weights as f64).floor() as usize,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBudget {
    #[serde(skip_serializing_if = "Option::is_none")]
    total_params: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fraction: Option<f64>,
    #[serde(default = "default_groups")]
    groups: usize,
    #[serde(default = "default_templates")]
    templates: usize,
    #[serde(default = "default_combiner")]
    combiner: Combiner,
    #[serde(default = "default_upsampler")]
    upsampler: Upsampler,
    #[serde(default = "default_window")]
    mask_window: usize,
    #[serde(default = "default_emb_dim")]
    emb_dim: usize,
    #[serde(default)]
    emb_softmax: bool,
}

fn default_groups() -> usize {
    1
}
fn default_templates() -> usize {
    DEFAULT_TEMPLATES
}
fn default_combiner() -> Combiner {
    Combiner::WAvg
}
fn default_upsampler() -> Upsampler {
    Upsampler::Mask
}
fn default_window() -> usize {
    DEFAULT_MASK_WINDOW
}
fn default_emb_dim() -> usize {
    DEFAULT_EMB_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Also decay α, φ, W_j, b_j and masks.
    pub decay_combiner: bool,
    /// Record wall-clock time in the metrics stream (breaks byte equality
    /// between runs).
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            decay_combiner: false,
            wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `blobs`, `two_spirals`, `csv:<path>` or `idx:<images>,<labels>`.
    pub source: String,
    /// Optional held-out file in the same format as `source`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_source: Option<String>,
    /// Tail fraction of a file source held out for evaluation when no
    /// `eval_source` is given.
    pub eval_fraction: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub centers_per_class: usize,
    pub spread: f64,
    pub noise: f64,
    /// Seed for synthetic generators; independent from the training seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "blobs".into(),
            eval_source: None,
            eval_fraction: 0.2,
            train_size: 2000,
            eval_size: 500,
            centers_per_class: 1,
            spread: 1.0,
            noise: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingMode {
    Auto,
    Single,
    Random,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    pub mode: MappingMode,
    /// Mapping file for `manual`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// `K'` of the preliminary single-group model.
    pub prelim_templates: usize,
    pub epochs_fraction: f64,
    /// Defaults to the main combiner when it learns coefficients, else `wavg`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prelim_combiner: Option<Combiner>,
    pub normalize_reps: bool,
    /// Independent k-means++ starts; the lowest-SSE run wins.
    pub restarts: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            mode: MappingMode::Single,
            file: None,
            prelim_templates: 4,
            epochs_fraction: 0.125,
            prelim_combiner: None,
            normalize_reps: false,
            restarts: 10,
        }
    }
}

impl MappingConfig {
    pub fn prelim_combiner(&self, main: Combiner) -> Combiner {
        self.prelim_combiner.unwrap_or(match main {
            Combiner::Emb => Combiner::Emb,
            _ => Combiner::WAvg,
        })
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    network: RawNetwork,
    budget: RawBudget,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    mapping: MappingConfig,
}

/// A fully validated experiment document.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub budget: BudgetSpec,
    pub budget_amount: BudgetAmount,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub mapping: MappingConfig,
    /// Directory relative paths in the document resolve against.
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let network = NetworkSpec::from_raw(raw.network)?;
        let b = raw.budget;
        let amount = match (b.total_params, b.fraction) {
            (Some(n), None) => BudgetAmount::Absolute(n),
            (None, Some(f)) if f > 0.0 && f.is_finite() => BudgetAmount::Fraction(f),
            (None, Some(f)) => {
                return Err(Error::Config(format!("budget.fraction {f} must be positive")))
            }
            _ => {
                return Err(Error::Config(
                    "budget needs exactly one of total_params or fraction".into(),
                ))
            }
        };
        let budget = BudgetSpec {
            total_params: amount.resolve(network.total_weights()),
            num_groups: b.groups,
            max_templates: b.templates,
            combiner: b.combiner,
            upsampler: b.upsampler,
            mask_window: b.mask_window,
            emb_dim: b.emb_dim,
            emb_softmax: b.emb_softmax,
        };
        budget.validate()?;
        let cfg = ExperimentConfig {
            network,
            budget,
            budget_amount: amount,
            train: raw.train,
            data: raw.data,
            mapping: raw.mapping,
            base_dir: base_dir.into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(t.lr >= 0.0 && t.momentum >= 0.0 && t.weight_decay >= 0.0) {
            return Err(Error::Config("train.lr, momentum and weight_decay must be >= 0".into()));
        }
        let m = &self.mapping;
        if m.prelim_templates < 2 {
            return Err(Error::Config("mapping.prelim_templates must be >= 2".into()));
        }
        if !(m.epochs_fraction > 0.0 && m.epochs_fraction <= 1.0) {
            return Err(Error::Config("mapping.epochs_fraction must lie in (0, 1]".into()));
        }
        if m.restarts == 0 {
            return Err(Error::Config("mapping.restarts must be >= 1".into()));
        }
        if matches!(
            m.prelim_combiner,
            Some(Combiner::Rr) | Some(Combiner::Avg)
        ) {
            return Err(Error::Config("mapping.prelim_combiner must be wavg or emb".into()));
        }
        if m.mode == MappingMode::Manual && m.file.is_none() {
            return Err(Error::Config("mapping.mode = \"manual\" needs mapping.file".into()));
        }
        if !(self.data.eval_fraction >= 0.0 && self.data.eval_fraction < 1.0) {
            return Err(Error::Config("data.eval_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Renders the configuration back into a document.
    pub fn to_toml(&self) -> String {
        let b = &self.budget;
        let (total_params, fraction) = match self.budget_amount {
            BudgetAmount::Absolute(n) => (Some(n), None),
            BudgetAmount::Fraction(f) => (None, Some(f)),
        };
        let raw = RawDoc {
            network: self.network.to_raw(),
            budget: RawBudget {
                total_params,
                fraction,
                groups: b.num_groups,
                templates: b.max_templates,
                combiner: b.combiner,
                upsampler: b.upsampler,
                mask_window: b.mask_window,
                emb_dim: b.emb_dim,
                emb_softmax: b.emb_softmax,
            },
            train: self.train.clone(),
            data: self.data.clone(),
            mapping: self.mapping.clone(),
        };
        toml::to_string(&raw).expect("config serializes")
    }

    /// Overrides the budget amount and re-resolves it.
    pub fn set_budget_amount(&mut self, amount: BudgetAmount) {
        self.budget_amount = amount;
        self.budget.total_params = amount.resolve(self.network.total_weights());
    }
}
