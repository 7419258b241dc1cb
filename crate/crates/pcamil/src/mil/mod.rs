//! Gated-attention MIL network over a patient's eigenvector bag: forward
//! pass, label-smoothed weighted BCE, exact reverse-mode gradients, ADAM,
//! and the one-patient-per-step training loop.
//!
//! Per instance `h_i`, the raw attention scores are
//! `W2 tanh(W1 h_i) (*) W3 sigmoid(W4 h_i)` (one score per head), and each
//! head's scores are softmax-normalized over the bag's instances so pooling
//! forms a convex combination of instance features per head. The pooled
//! head features are flattened head-major and fed to a linear classifier.
//!
//! All arithmetic is in f64. Forward and gradient evaluation are pure;
//! training owns a single parameter set per fold.

mod adam;
mod backward;
mod checkpoint;
mod forward;
mod train;

pub use adam::{adam_step, AdamState};
pub use backward::{gradients, loss_and_gradients, MilGrads};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_history,
};
pub use forward::{
    bag_probability, feature_mlp, gated_attention, smoothed_weighted_bce, BagOutput,
};
pub use train::{init_params, train_fold, CheckpointRule, EpochStats, TrainingHistory};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;

#[derive(Debug, Error)]
pub enum MilError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("value {0} outside the domain of the loss")]
    DomainError(f64),
    #[error("invalid MIL config: {0}")]
    InvalidConfig(String),
    #[error("training set must contain both classes")]
    SingleClassTrainingSet,
    #[error("non-finite loss at epoch {epoch} on patient {patient_id:?}")]
    NonFiniteLoss { epoch: usize, patient_id: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Network and optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    /// Instance feature dimension (the bag's feature dim).
    pub d_in: usize,
    #[serde(default = "default_d_hidden")]
    pub d_hidden: usize,
    #[serde(default = "default_d_att")]
    pub d_att: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Label smoothing rate, in [0, 0.5).
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    /// Feed eigenvectors scaled by sqrt(eigenvalue) instead of unit-norm.
    #[serde(default)]
    pub scale_instances_by_eigenvalue: bool,
}

fn default_d_hidden() -> usize {
    512
}
fn default_d_att() -> usize {
    128
}
fn default_n_heads() -> usize {
    3
}
fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.7
}
fn default_beta2() -> f64 {
    0.99
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    10
}
fn default_label_smoothing() -> f64 {
    0.01
}

impl MilConfig {
    /// Defaults for a given input dimension: hidden 512, attention 128,
    /// 3 heads, ADAM (0.7, 0.99) at lr 1e-4, 10 epochs, smoothing 0.01.
    pub fn for_input_dim(d_in: usize) -> Self {
        MilConfig {
            d_in,
            d_hidden: default_d_hidden(),
            d_att: default_d_att(),
            n_heads: default_n_heads(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            epochs: default_epochs(),
            label_smoothing: default_label_smoothing(),
            seed: 0,
            scale_instances_by_eigenvalue: false,
        }
    }

    pub fn validate(&self) -> Result<(), MilError> {
        let fail = |msg: String| Err(MilError::InvalidConfig(msg));
        for (name, v) in [
            ("d_in", self.d_in),
            ("d_hidden", self.d_hidden),
            ("d_att", self.d_att),
            ("n_heads", self.n_heads),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} = {v} must be positive and finite"));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return fail("betas must be below 1".into());
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing {} not in [0, 0.5)",
                self.label_smoothing
            ));
        }
        Ok(())
    }
}

/// All learnable weights. The attention projections carry no biases; the
/// feature MLP and the classifier do.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    /// `d_hidden x d_in` feature MLP weight.
    pub w_f: Array2<f64>,
    pub b_f: Array1<f64>,
    /// `d_att x d_hidden` tanh branch projection.
    pub w1: Array2<f64>,
    /// `d_att x d_hidden` sigmoid (gate) branch projection.
    pub w4: Array2<f64>,
    /// `n_heads x d_att` tanh branch head map.
    pub w2: Array2<f64>,
    /// `n_heads x d_att` gate branch head map.
    pub w3: Array2<f64>,
    /// `n_heads * d_hidden` classifier weights over the flattened pooling.
    pub w5: Array1<f64>,
    pub b5: f64,
}

impl MilParams {
    pub fn zeros(cfg: &MilConfig) -> Self {
        MilParams {
            w_f: Array2::zeros((cfg.d_hidden, cfg.d_in)),
            b_f: Array1::zeros(cfg.d_hidden),
            w1: Array2::zeros((cfg.d_att, cfg.d_hidden)),
            w4: Array2::zeros((cfg.d_att, cfg.d_hidden)),
            w2: Array2::zeros((cfg.n_heads, cfg.d_att)),
            w3: Array2::zeros((cfg.n_heads, cfg.d_att)),
            w5: Array1::zeros(cfg.n_heads * cfg.d_hidden),
            b5: 0.0,
        }
    }

    pub fn matches_config(&self, cfg: &MilConfig) -> bool {
        self.w_f.dim() == (cfg.d_hidden, cfg.d_in)
            && self.b_f.len() == cfg.d_hidden
            && self.w1.dim() == (cfg.d_att, cfg.d_hidden)
            && self.w4.dim() == (cfg.d_att, cfg.d_hidden)
            && self.w2.dim() == (cfg.n_heads, cfg.d_att)
            && self.w3.dim() == (cfg.n_heads, cfg.d_att)
            && self.w5.len() == cfg.n_heads * cfg.d_hidden
    }

    pub fn all_finite(&self) -> bool {
        self.w_f.iter().all(|v| v.is_finite())
            && self.b_f.iter().all(|v| v.is_finite())
            && self.w1.iter().all(|v| v.is_finite())
            && self.w4.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.w3.iter().all(|v| v.is_finite())
            && self.w5.iter().all(|v| v.is_finite())
            && self.b5.is_finite()
    }
}

/// Inverse-frequency class weights normalized to mean 1 over the classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassWeights {
    pub msi: f64,
    pub mss: f64,
}

impl ClassWeights {
    /// Unit weights: every patient counts the same.
    pub fn uniform() -> Self {
        ClassWeights { msi: 1.0, mss: 1.0 }
    }

    /// Weights from the training fold's patient-level class fractions.
    pub fn from_labels(labels: &[Label]) -> Result<Self, MilError> {
        let n = labels.len();
        let n_msi = labels.iter().filter(|l| l.is_positive()).count();
        let n_mss = n - n_msi;
        if n_msi == 0 || n_mss == 0 {
            return Err(MilError::SingleClassTrainingSet);
        }
        let inv_msi = n as f64 / n_msi as f64;
        let inv_mss = n as f64 / n_mss as f64;
        let mean = 0.5 * (inv_msi + inv_mss);
        Ok(ClassWeights {
            msi: inv_msi / mean,
            mss: inv_mss / mean,
        })
    }

    pub fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Msi => self.msi,
            Label::Mss => self.mss,
        }
    }
}
