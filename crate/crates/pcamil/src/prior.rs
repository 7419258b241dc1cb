//! Patient-level score composition outside the MIL network: mean
//! aggregation of patch probabilities, the multiplicative clinical side
//! prior, the side-only classifier with its Bayes arithmetic, and the
//! trainable linear patch scorer behind the patch-classification arms.
//!
//! The prior multiplies every right/undefined patient's score by `beta` and
//! every left patient's score by the left weight, so ordering within a side
//! group is preserved exactly.

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, Side};
use crate::mil::ClassWeights;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("cannot aggregate an empty bag of patch probabilities")]
    EmptyBag,
    #[error("patch probability {0} outside [0,1]")]
    InvalidProbability(f64),
    #[error("evidence probability must be positive")]
    ZeroEvidence,
    #[error("posterior {0} falls outside [0,1]; inputs are inconsistent")]
    OutOfRangePosterior(f64),
    #[error("invalid prior config: {0}")]
    InvalidConfig(String),
    #[error("patch training set must contain both classes")]
    SingleClassTrainingSet,
    #[error("patch matrix and label list disagree: {0}")]
    ShapeMismatch(String),
}

/// Side prior weights. The left weight encodes how rarely left-sided tumors
/// are MSI; right and undefined sides share `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    #[serde(default = "default_left_weight")]
    pub left_weight: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_left_weight() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    1.0
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            left_weight: default_left_weight(),
            beta: default_beta(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        if !(self.left_weight > 0.0 && self.left_weight <= 1.0) {
            return Err(PriorError::InvalidConfig(format!(
                "left_weight {} not in (0,1]",
                self.left_weight
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(PriorError::InvalidConfig(format!(
                "beta {} not in (0,1]",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Arithmetic mean of per-patch MSI probabilities.
pub fn mean_aggregate(patch_probs: &[f64]) -> Result<f64, PriorError> {
    if patch_probs.is_empty() {
        return Err(PriorError::EmptyBag);
    }
    for &p in patch_probs {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(PriorError::InvalidProbability(p));
        }
    }
    Ok(patch_probs.iter().sum::<f64>() / patch_probs.len() as f64)
}

/// Multiplicative factor for a tumor side: left gets the left weight,
/// right and undefined get beta.
pub fn side_prior(side: Side, cfg: &PriorConfig) -> f64 {
    match side {
        Side::Left => cfg.left_weight,
        Side::Right | Side::Undefined => cfg.beta,
    }
}

/// Final score: classifier output times the side prior.
pub fn apply_prior(p: f64, side: Side, cfg: &PriorConfig) -> f64 {
    p * side_prior(side, cfg)
}

/// Deterministic side-only classification: right and undefined map to MSI,
/// left maps to MSS.
pub fn side_only_classifier(side: Side) -> Label {
    match side {
        Side::Right | Side::Undefined => Label::Msi,
        Side::Left => Label::Mss,
    }
}

/// `P(A|B) = P(B|A) P(A) / P(B)`, guarded against impossible inputs.
pub fn bayes_posterior(likelihood: f64, prior: f64, evidence: f64) -> Result<f64, PriorError> {
    if !(evidence > 0.0) {
        return Err(PriorError::ZeroEvidence);
    }
    let posterior = likelihood * prior / evidence;
    if !(0.0..=1.0).contains(&posterior) {
        return Err(PriorError::OutOfRangePosterior(posterior));
    }
    Ok(posterior)
}

/// Linear logistic model over patch features: `sigmoid(w . x + b)`. A
/// deliberately simple stand-in for a fine-tuned CNN patch classifier; the
/// experiment's claim is the relative ordering of methods, not absolute
/// patch-level accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScorer {
    weights: Array1<f64>,
    bias: f64,
}

impl PatchScorer {
    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    /// MSI probability of a single patch.
    pub fn score(&self, patch: &[f64]) -> f64 {
        let logit: f64 = self
            .weights
            .iter()
            .zip(patch)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias;
        1.0 / (1.0 + (-logit).exp())
    }

    /// Scores every row of a patch matrix.
    pub fn score_bag(&self, patches: &Array2<f64>) -> Vec<f64> {
        patches
            .rows()
            .into_iter()
            .map(|row| self.score(row.as_slice().expect("standard layout")))
            .collect()
    }
}

/// Trains the patch scorer by full-batch ADAM on class-weighted BCE over
/// patches carrying their patient's label.
pub fn train_patch_scorer(
    patches: &Array2<f64>,
    labels: &[Label],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PatchScorer, PriorError> {
    if patches.nrows() != labels.len() {
        return Err(PriorError::ShapeMismatch(format!(
            "{} patch rows vs {} labels",
            patches.nrows(),
            labels.len()
        )));
    }
    let weights = ClassWeights::from_labels(labels)
        .map_err(|_| PriorError::SingleClassTrainingSet)?;
    let n = patches.nrows();
    let d = patches.ncols();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let bound = 1.0 / (d as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut w = Array1::from_shape_fn(d, |_| dist.sample(&mut rng));
    let mut b = 0.0f64;

    let mut m_w = Array1::<f64>::zeros(d);
    let mut v_w = Array1::<f64>::zeros(d);
    let (mut m_b, mut v_b) = (0.0f64, 0.0f64);
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let targets: Vec<f64> = labels.iter().map(|l| l.as_target()).collect();
    let sample_weights: Vec<f64> = labels.iter().map(|&l| weights.for_label(l)).collect();

    for t in 1..=epochs as i32 {
        // Full-batch gradient of the mean weighted BCE.
        let logits = patches.dot(&w) + b;
        let mut grad_w = Array1::<f64>::zeros(d);
        let mut grad_b = 0.0;
        for i in 0..n {
            let p = 1.0 / (1.0 + (-logits[i]).exp());
            let g = sample_weights[i] * (p - targets[i]) / n as f64;
            grad_w.scaled_add(g, &patches.row(i).to_owned());
            grad_b += g;
        }
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for j in 0..d {
            m_w[j] = beta1 * m_w[j] + (1.0 - beta1) * grad_w[j];
            v_w[j] = beta2 * v_w[j] + (1.0 - beta2) * grad_w[j] * grad_w[j];
            w[j] -= lr * (m_w[j] / bias1) / ((v_w[j] / bias2).sqrt() + eps);
        }
        m_b = beta1 * m_b + (1.0 - beta1) * grad_b;
        v_b = beta2 * v_b + (1.0 - beta2) * grad_b * grad_b;
        b -= lr * (m_b / bias1) / ((v_b / bias2).sqrt() + eps);
    }

    Ok(PatchScorer { weights: w, bias: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    #[test]
    fn mean_aggregate_is_the_mean() {
        assert!((mean_aggregate(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(mean_aggregate(&[0.7]).unwrap(), 0.7);
        assert_eq!(mean_aggregate(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn mean_aggregate_rejects_empty_and_out_of_range() {
        assert!(matches!(mean_aggregate(&[]), Err(PriorError::EmptyBag)));
        assert!(matches!(
            mean_aggregate(&[0.5, 1.2]),
            Err(PriorError::InvalidProbability(_))
        ));
    }

    #[test]
    fn mean_aggregate_is_bounded_and_permutation_invariant() {
        let probs = [0.1, 0.9, 0.3, 0.5, 0.2];
        let mut reversed = probs;
        reversed.reverse();
        let a = mean_aggregate(&probs).unwrap();
        let b = mean_aggregate(&reversed).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.1 && a <= 0.9);
    }

    #[test]
    fn side_prior_matches_the_piecewise_definition() {
        let cfg = PriorConfig::default();
        assert_eq!(side_prior(Side::Left, &cfg), 0.1);
        assert_eq!(side_prior(Side::Right, &cfg), 1.0);
        let cfg = PriorConfig {
            beta: 0.9,
            ..PriorConfig::default()
        };
        assert_eq!(side_prior(Side::Undefined, &cfg), 0.9);
    }

    #[test]
    fn apply_prior_multiplies() {
        let cfg = PriorConfig::default();
        assert!((apply_prior(0.8, Side::Left, &cfg) - 0.08).abs() < 1e-15);
        assert_eq!(apply_prior(0.8, Side::Right, &cfg), 0.8);
        assert_eq!(apply_prior(0.0, Side::Left, &cfg), 0.0);
        assert_eq!(apply_prior(0.0, Side::Undefined, &cfg), 0.0);
    }

    #[test]
    fn beta_one_is_identity_on_right_and_undefined() {
        let cfg = PriorConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p: f64 = rng.gen_range(0.0..1.0);
            assert_eq!(apply_prior(p, Side::Right, &cfg), p);
            assert_eq!(apply_prior(p, Side::Undefined, &cfg), p);
        }
    }

    #[test]
    fn within_side_ordering_is_preserved() {
        let cfg = PriorConfig {
            left_weight: 0.1,
            beta: 0.9,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for &side in &[Side::Left, Side::Right, Side::Undefined] {
            for _ in 0..300 {
                let a: f64 = rng.gen_range(0.0..1.0);
                let b: f64 = rng.gen_range(0.0..1.0);
                let fa = apply_prior(a, side, &cfg);
                let fb = apply_prior(b, side, &cfg);
                assert_eq!(a < b, fa < fb);
                assert_eq!(a == b, fa == fb);
            }
        }
    }

    #[test]
    fn side_only_classification_follows_the_prior_branches() {
        assert_eq!(side_only_classifier(Side::Right), Label::Msi);
        assert_eq!(side_only_classifier(Side::Left), Label::Mss);
        assert_eq!(side_only_classifier(Side::Undefined), Label::Msi);
    }

    #[test]
    fn bayes_posteriors_match_the_cohort_arithmetic() {
        // P(MSI | right) = 0.87 * 0.18 / 0.44 = 0.3559, reported as 0.35.
        let right = bayes_posterior(0.87, 0.18, 0.44).unwrap();
        assert!((right - 0.35).abs() < 0.01);
        // P(MSI | left) = 0.13 * 0.18 / 0.56 = 0.0418, reported as 0.04.
        let left = bayes_posterior(0.13, 0.18, 0.56).unwrap();
        assert!((left - 0.04).abs() < 0.01);
    }

    #[test]
    fn bayes_posterior_handles_edge_inputs() {
        assert_eq!(bayes_posterior(1.0, 0.3, 1.0).unwrap(), 0.3);
        assert!(matches!(
            bayes_posterior(0.5, 0.5, 0.0),
            Err(PriorError::ZeroEvidence)
        ));
        assert!(matches!(
            bayes_posterior(0.9, 0.9, 0.1),
            Err(PriorError::OutOfRangePosterior(_))
        ));
    }

    fn separable_patches(n_per_class: usize, seed: u64) -> (Array2<f64>, Vec<Label>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = 6;
        let mut patches = Array::zeros((2 * n_per_class, d));
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let label = if i < n_per_class { Label::Msi } else { Label::Mss };
            let center = if label == Label::Msi { 1.5 } else { -1.5 };
            for j in 0..d {
                patches[[i, j]] = center + rng.gen_range(-0.5..0.5);
            }
            labels.push(label);
        }
        (patches, labels)
    }

    #[test]
    fn scorer_separates_separable_clouds() {
        let (patches, labels) = separable_patches(60, 8);
        let scorer = train_patch_scorer(&patches, &labels, 200, 0.05, 1).unwrap();
        let correct = patches
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(row, label)| {
                let p = scorer.score(row.as_slice().unwrap());
                (p >= 0.5) == label.is_positive()
            })
            .count();
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn scorer_outputs_probabilities() {
        let (patches, labels) = separable_patches(10, 9);
        let scorer = train_patch_scorer(&patches, &labels, 50, 0.05, 2).unwrap();
        for row in patches.rows() {
            let p = scorer.score(row.as_slice().unwrap());
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn scorer_is_seed_deterministic() {
        let (patches, labels) = separable_patches(10, 10);
        let a = train_patch_scorer(&patches, &labels, 50, 0.05, 3).unwrap();
        let b = train_patch_scorer(&patches, &labels, 50, 0.05, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scorer_requires_both_classes() {
        let (patches, _) = separable_patches(5, 11);
        let labels = vec![Label::Mss; patches.nrows()];
        assert!(matches!(
            train_patch_scorer(&patches, &labels, 10, 0.05, 4),
            Err(PriorError::SingleClassTrainingSet)
        ));
    }
}
