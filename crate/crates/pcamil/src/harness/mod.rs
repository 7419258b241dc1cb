//! Experiment orchestration: stratified cross-validation over the training
//! manifest, training of every method arm, evaluation on the external test
//! manifest, statistical comparisons, hyperparameter sweeps, and report
//! emission.

mod experiment;
mod kfold;
mod report;
mod sweep;

pub use experiment::{run_experiment, ExperimentSummary, FoldReport, MethodMetrics};
pub use kfold::stratified_kfold;
pub use report::{reaggregate_reports, write_summary_json};
pub use sweep::{hyperparameter_sweep, write_sweep_csv, SweepAxis, SweepRow, SweepTable};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::mil::{MilConfig, MilError};
use crate::pca::PcaError;
use crate::prior::{PriorConfig, PriorError};

/// Environment variable capping fold-level parallelism (default 1).
pub const THREADS_ENV: &str = "PCAMIL_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("class {class} has {count} patients, fewer than {folds} folds")]
    TooFewPerClass {
        class: String,
        count: usize,
        folds: usize,
    },
    #[error("fold {fold} failed: {source}")]
    FoldFailed {
        fold: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Mil(#[from] MilError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI exit code: 2 invalid config, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::InvalidConfig(_) | HarnessError::TooFewPerClass { .. } => 2,
            HarnessError::FoldFailed { source, .. } => source.exit_code(),
            HarnessError::Data(DataError::InvalidConfig(_)) => 2,
            HarnessError::Data(_) | HarnessError::Io(_) => 3,
            HarnessError::Pca(PcaError::InvalidK) => 2,
            HarnessError::Pca(PcaError::Data(_)) => 3,
            HarnessError::Pca(_) => 4,
            HarnessError::Mil(MilError::InvalidConfig(_)) => 2,
            HarnessError::Mil(MilError::Data(_)) => 3,
            HarnessError::Mil(MilError::SingleClassTrainingSet | MilError::ShapeMismatch(_)) => 3,
            HarnessError::Mil(_) => 4,
            HarnessError::Prior(PriorError::InvalidConfig(_)) => 2,
            HarnessError::Prior(PriorError::SingleClassTrainingSet) => 3,
            HarnessError::Prior(PriorError::ShapeMismatch(_)) => 3,
            HarnessError::Prior(PriorError::EmptyBag) => 3,
            HarnessError::Prior(_) => 4,
            HarnessError::Metrics(MetricsError::InvalidScore(_)) => 4,
            HarnessError::Metrics(_) => 3,
        }
    }
}

/// The five method arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum Method {
    #[serde(rename = "Baseline")]
    Baseline,
    #[serde(rename = "CI-Baseline")]
    CiBaseline,
    #[serde(rename = "CI-CRC")]
    CiCrc,
    #[serde(rename = "MIL-CRC")]
    MilCrc,
    #[serde(rename = "CIMIL-CRC")]
    CimilCrc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::CiBaseline,
        Method::CiCrc,
        Method::MilCrc,
        Method::CimilCrc,
    ];

    pub fn parse(s: &str) -> Option<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Some(Method::Baseline),
            "ci-baseline" => Some(Method::CiBaseline),
            "ci-crc" => Some(Method::CiCrc),
            "mil-crc" => Some(Method::MilCrc),
            "cimil-crc" => Some(Method::CimilCrc),
            _ => None,
        }
    }

    /// Trained per fold (everything except the deterministic CI-CRC arm).
    pub fn is_fold_based(self) -> bool {
        self != Method::CiCrc
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "Baseline",
            Method::CiBaseline => "CI-Baseline",
            Method::CiCrc => "CI-CRC",
            Method::MilCrc => "MIL-CRC",
            Method::CimilCrc => "CIMIL-CRC",
        })
    }
}

/// Everything one experiment run needs. Loadable from JSON; unknown fields
/// are rejected so config typos fail fast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_n_folds")]
    pub n_folds: usize,
    #[serde(default = "default_k_eigenvectors")]
    pub k_eigenvectors: usize,
    /// Label smoothing rate; overrides `mil.label_smoothing`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eps_rank")]
    pub eps_rank: f64,
    #[serde(default)]
    pub prior: PriorConfig,
    /// MIL architecture and optimizer settings. `d_in` may be left 0; it is
    /// filled from the dataset's feature dimension at run time.
    #[serde(default = "default_mil")]
    pub mil: MilConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_scorer_epochs")]
    pub scorer_epochs: usize,
    #[serde(default = "default_scorer_lr")]
    pub scorer_lr: f64,
    /// Decision threshold for all thresholded metrics, applied to the final
    /// (post-prior) score.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_folds() -> usize {
    5
}
fn default_k_eigenvectors() -> usize {
    90
}
fn default_alpha() -> f64 {
    0.01
}
fn default_eps_rank() -> f64 {
    crate::pca::DEFAULT_EPS_RANK
}
fn default_mil() -> MilConfig {
    MilConfig::for_input_dim(0)
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_scorer_epochs() -> usize {
    200
}
fn default_scorer_lr() -> f64 {
    0.05
}
fn default_threshold() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn new(
        train_manifest: impl Into<PathBuf>,
        test_manifest: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        ExperimentConfig {
            train_manifest: train_manifest.into(),
            test_manifest: test_manifest.into(),
            output_dir: output_dir.into(),
            n_folds: default_n_folds(),
            k_eigenvectors: default_k_eigenvectors(),
            alpha: default_alpha(),
            eps_rank: default_eps_rank(),
            prior: PriorConfig::default(),
            mil: default_mil(),
            methods: default_methods(),
            scorer_epochs: default_scorer_epochs(),
            scorer_lr: default_scorer_lr(),
            threshold: default_threshold(),
            seed: 0,
        }
    }

    pub fn from_json_str(json: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(json).map_err(|e| HarnessError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                HarnessError::Data(DataError::MissingFile(path.to_path_buf()))
            }
            _ => HarnessError::Io(e),
        })?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::InvalidConfig(msg));
        if self.n_folds < 2 {
            return fail(format!("n_folds {} must be at least 2", self.n_folds));
        }
        if self.k_eigenvectors < 1 {
            return fail("k_eigenvectors must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return fail(format!("alpha {} not in [0, 0.5)", self.alpha));
        }
        if !(self.eps_rank >= 0.0 && self.eps_rank < 1.0) {
            return fail(format!("eps_rank {} not in [0, 1)", self.eps_rank));
        }
        if self.methods.is_empty() {
            return fail("methods list is empty".into());
        }
        if self.scorer_epochs == 0 || !(self.scorer_lr > 0.0) {
            return fail("patch scorer needs positive epochs and lr".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold {} not in [0,1]", self.threshold));
        }
        self.prior.validate()?;
        Ok(())
    }

    /// Methods to run, deduplicated, in canonical report order.
    pub fn ordered_methods(&self) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|m| self.methods.contains(m))
            .collect()
    }
}

/// splitmix64 step: stable derivation of per-fold and per-component seeds.
pub(crate) fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E3779B97F4A7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B54A32D192ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub(crate) fn fold_thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip_with_defaults() {
        let json = r#"{
            "train_manifest": "train.csv",
            "test_manifest": "test.csv",
            "output_dir": "out"
        }"#;
        let cfg = ExperimentConfig::from_json_str(json).unwrap();
        assert_eq!(cfg.n_folds, 5);
        assert_eq!(cfg.k_eigenvectors, 90);
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!(cfg.prior.beta, 1.0);
        assert_eq!(cfg.methods.len(), 5);
        assert_eq!(cfg.mil.d_hidden, 512);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let json = r#"{
            "train_manifest": "a", "test_manifest": "b", "output_dir": "c",
            "n_flods": 5
        }"#;
        assert!(matches!(
            ExperimentConfig::from_json_str(json),
            Err(HarnessError::InvalidConfig(_))
        ));
    }

    #[test]
    fn method_names_match_the_report_vocabulary() {
        assert_eq!(Method::CimilCrc.to_string(), "CIMIL-CRC");
        assert_eq!(Method::parse("cimil-crc"), Some(Method::CimilCrc));
        assert_eq!(Method::parse("CI-Baseline"), Some(Method::CiBaseline));
        assert_eq!(Method::parse("nope"), None);
    }

    #[test]
    fn invalid_configs_fail_validation() {
        let mut cfg = ExperimentConfig::new("a", "b", "c");
        cfg.n_folds = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new("a", "b", "c");
        cfg.alpha = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new("a", "b", "c");
        cfg.prior.beta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        let a = derive_seed(7, 1);
        let b = derive_seed(7, 2);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, 1));
    }
}
