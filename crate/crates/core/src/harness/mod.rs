//! Hold-one-domain-out experiments.
//!
//! An [`ExperimentConfig`] expands into one run per `(alpha, held-out domain,
//! seed)`. Each run builds the suite, drops the held-out domain before any
//! training code sees it, trains from a seed-derived initialization and
//! reports held-out accuracy, loss traces and diagnostics.

mod report;
mod train;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::SuiteSpec;
use crate::error::{HirError, Result};
use crate::losses::{HirOptions, LossKind};
use crate::optim::AdamConfig;

pub use report::{
    deterministic_json, run_stem, write_outputs, write_results_csv, write_trace_csv, RunRecord, RunReport,
    RunStatus, SummaryRow,
};
pub use train::{
    evaluate, objective, run_experiment, run_experiment_with, run_single, train, train_step, workers_from_env,
    DomainTrace, EpochTrace, RunOptions, StepStats, TrainOutcome, TrainSettings,
};

/// Environment variable bounding the number of runs executed in parallel.
pub const WORKERS_ENV: &str = "HIRNET_WORKERS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: default_hidden(),
        }
    }
}

/// Which domains are held out, in turn.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum HeldOut {
    #[default]
    All,
    Domains(Vec<usize>),
}

impl HeldOut {
    pub fn resolve(&self, domain_count: usize) -> Result<Vec<usize>> {
        match self {
            HeldOut::All => Ok((0..domain_count).collect()),
            HeldOut::Domains(ds) => {
                if ds.is_empty() {
                    return Err(HirError::Config("held_out list is empty".into()));
                }
                if let Some(&d) = ds.iter().find(|&&d| d >= domain_count) {
                    return Err(HirError::Config(format!(
                        "held_out domain {d} out of range for {domain_count} domains"
                    )));
                }
                Ok(ds.clone())
            }
        }
    }
}

impl Serialize for HeldOut {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HeldOut::All => s.serialize_str("all"),
            HeldOut::Domains(ds) if ds.len() == 1 => s.serialize_u64(ds[0] as u64),
            HeldOut::Domains(ds) => ds.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for HeldOut {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Word(String),
            One(usize),
            Many(Vec<usize>),
        }
        match Repr::deserialize(d)? {
            Repr::Word(w) if w == "all" => Ok(HeldOut::All),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "held_out must be \"all\", a domain index or a list of indices, got {w:?}"
            ))),
            Repr::One(i) => Ok(HeldOut::Domains(vec![i])),
            Repr::Many(v) => Ok(HeldOut::Domains(v)),
        }
    }
}

impl fmt::Display for HeldOut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeldOut::All => f.write_str("all"),
            HeldOut::Domains(ds) => write!(f, "{ds:?}"),
        }
    }
}

fn default_loss() -> LossKind {
    LossKind::Hir
}
fn default_alpha() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    300
}
fn default_per_cell() -> usize {
    5
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_true() -> bool {
    true
}
fn default_probe() -> usize {
    200
}

/// Experiment description; the JSON config file uses these field names.
///
/// `alpha` weights the extra term of every non-`agg` loss: the posterior KL
/// for `hir`, the domain MMD for `mmd`, the cross-domain feature distance for
/// `ccsa`. A non-empty `alphas` list replaces `alpha` with a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub suite: SuiteSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(default)]
    pub normalize_hir: bool,
    #[serde(default)]
    pub cross_domain_only: bool,
    #[serde(default)]
    pub symmetric_hir: bool,
    #[serde(default)]
    pub paired: bool,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_per_cell")]
    pub per_class_per_domain: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub held_out: HeldOut,
    /// Fold batching instead of per-cell sampling when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_folds: Option<usize>,
    /// Train on this stratified fraction of each source domain and report
    /// accuracy on the remainder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    /// Fixed MMD bandwidth for the `mmd` loss; median heuristic per batch
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd_bandwidth: Option<f64>,
    #[serde(default = "default_true")]
    pub diagnostics: bool,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HirError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Alpha values to run. `agg` always runs once with alpha 0.
    pub fn alpha_grid(&self) -> Vec<f64> {
        if self.loss == LossKind::Agg {
            return vec![0.0];
        }
        match &self.alphas {
            Some(a) if !a.is_empty() => a.clone(),
            _ => vec![self.alpha],
        }
    }

    pub fn hir_options(&self) -> HirOptions {
        HirOptions {
            cross_domain_only: self.cross_domain_only,
            normalize: self.normalize_hir,
            symmetric: self.symmetric_hir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HirError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        for &a in std::iter::once(&self.alpha).chain(self.alphas.iter().flatten()) {
            if !(a.is_finite() && a >= 0.0) {
                return bad(format!("alpha must be finite and non-negative, got {a}"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.per_class_per_domain == 0 {
            return bad("per_class_per_domain must be at least 1".into());
        }
        if self.model.hidden_sizes.contains(&0) {
            return bad(format!("hidden sizes must be positive: {:?}", self.model.hidden_sizes));
        }
        if self.suite.n_per_class == 0 {
            return bad("suite.n_per_class must be at least 1".into());
        }
        if self.suite.class_count < 2 {
            return bad("suite.class_count must be at least 2".into());
        }
        if self.suite.angles.is_empty() {
            return bad("suite.angles must not be empty".into());
        }
        if self.n_folds == Some(0) {
            return bad("n_folds must be at least 1".into());
        }
        if let Some(f) = self.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("train_fraction must lie in (0, 1), got {f}"));
            }
        }
        if let Some(b) = self.mmd_bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return bad(format!("mmd_bandwidth must be positive, got {b}"));
            }
        }
        if let Some(p) = &self.suite.prior_shift {
            p.validate(self.suite.angles.len(), self.suite.class_count)?;
        }
        self.optimizer.validate()?;
        self.held_out.resolve(self.suite.angles.len())?;
        Ok(())
    }
}

/// splitmix64 finalizer; derives independent stream seeds from a run seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds used by one run. None depend on the held-out domain or alpha, so
/// every method and held-out choice of one seed shares data and init.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub suite: u64,
    pub model: u64,
    pub sampler: u64,
    pub diagnostics: u64,
}

impl RunSeeds {
    pub fn derive(suite_seed: u64, run_seed: u64) -> Self {
        Self {
            suite: mix_seed(suite_seed, mix_seed(run_seed, 0)),
            model: mix_seed(run_seed, 1),
            sampler: mix_seed(run_seed, 2),
            diagnostics: mix_seed(run_seed, 3),
        }
    }
}
