//! PCA-based multiple-instance learning for bag-level binary classification.
pub mod data;
pub mod harness;
pub mod metrics;
pub mod mil;
pub mod pca;
pub mod prior;
pub mod stats;
