//! Per-fold training loop: batch size one patient, seeded shuffling,
//! accuracy-gated checkpointing.

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::adam::{adam_step, AdamState};
use super::backward::loss_and_gradients;
use super::{ClassWeights, MilConfig, MilError, MilParams};
use crate::data::Label;
use crate::pca::EigenBasis;

/// Checkpointing thresholds: a snapshot is taken after any epoch where both
/// training accuracies strictly exceed their bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckpointRule {
    pub min_overall_accuracy: f64,
    pub min_msi_accuracy: f64,
}

impl Default for CheckpointRule {
    fn default() -> Self {
        CheckpointRule {
            min_overall_accuracy: 0.95,
            min_msi_accuracy: 0.95,
        }
    }
}

/// One epoch's training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub acc_overall: f64,
    pub acc_msi: f64,
    pub checkpointed: bool,
}

/// Full training trace plus which checkpoint (if any) was returned.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch of the last checkpoint that fired; `None` means the final-epoch
    /// parameters were returned instead.
    pub checkpoint_epoch: Option<usize>,
}

/// Seeded initialization: every weight matrix uniform in
/// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, biases zero.
pub fn init_params(cfg: &MilConfig) -> MilParams {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params = MilParams::zeros(cfg);
    fill_uniform(&mut params.w_f, cfg.d_in, &mut rng);
    fill_uniform(&mut params.w1, cfg.d_hidden, &mut rng);
    fill_uniform(&mut params.w4, cfg.d_hidden, &mut rng);
    fill_uniform(&mut params.w2, cfg.d_att, &mut rng);
    fill_uniform(&mut params.w3, cfg.d_att, &mut rng);
    let bound = 1.0 / ((cfg.n_heads * cfg.d_hidden) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in params.w5.iter_mut() {
        *v = dist.sample(&mut rng);
    }
    params
}

fn fill_uniform(tensor: &mut Array2<f64>, fan_in: usize, rng: &mut ChaCha20Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in tensor.iter_mut() {
        *v = dist.sample(rng);
    }
}

/// Trains on one fold's eigen-bags. Visits patients in a freshly shuffled
/// order each epoch, takes one optimizer step per patient, evaluates
/// training accuracies after every epoch, and returns the last qualifying
/// checkpoint (or the final-epoch parameters when none fired).
pub fn train_fold(
    bags: &[(EigenBasis, Label)],
    cfg: &MilConfig,
    rule: &CheckpointRule,
) -> Result<(MilParams, TrainingHistory), MilError> {
    cfg.validate()?;
    if bags.is_empty() {
        return Err(MilError::SingleClassTrainingSet);
    }
    let labels: Vec<Label> = bags.iter().map(|(_, l)| *l).collect();
    let weights = ClassWeights::from_labels(&labels)?;
    for (basis, _) in bags {
        if basis.feature_dim() != cfg.d_in {
            return Err(MilError::ShapeMismatch(format!(
                "bag {} has feature dim {}, config expects {}",
                basis.patient_id(),
                basis.feature_dim(),
                cfg.d_in
            )));
        }
    }

    let instances: Vec<Array2<f64>> = bags
        .iter()
        .map(|(basis, _)| basis.instances(cfg.scale_instances_by_eigenvalue))
        .collect();

    let mut params = init_params(cfg);
    let mut state = AdamState::new(cfg);
    // The shuffle stream continues from the init stream, so one seed pins
    // the whole trajectory.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut history = TrainingHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        checkpoint_epoch: None,
    };
    let mut checkpoint: Option<MilParams> = None;
    let mut order: Vec<usize> = (0..bags.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let (basis, label) = &bags[idx];
            let (_, loss, grads) = loss_and_gradients(
                &params,
                &instances[idx],
                *label,
                cfg.label_smoothing,
                &weights,
            )?;
            if !loss.is_finite() {
                return Err(MilError::NonFiniteLoss {
                    epoch,
                    patient_id: basis.patient_id().to_string(),
                });
            }
            loss_sum += loss;
            adam_step(&mut state, &mut params, &grads, cfg)?;
        }

        let (acc_overall, acc_msi) = training_accuracies(&params, &instances, &labels)?;
        let fired =
            acc_overall > rule.min_overall_accuracy && acc_msi > rule.min_msi_accuracy;
        if fired {
            checkpoint = Some(params.clone());
            history.checkpoint_epoch = Some(epoch);
        }
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / bags.len() as f64,
            acc_overall,
            acc_msi,
            checkpointed: fired,
        });
    }

    Ok((checkpoint.unwrap_or(params), history))
}

/// Overall and MSI-class accuracy at threshold 0.5.
fn training_accuracies(
    params: &MilParams,
    instances: &[Array2<f64>],
    labels: &[Label],
) -> Result<(f64, f64), MilError> {
    let mut correct = 0usize;
    let mut msi_total = 0usize;
    let mut msi_correct = 0usize;
    for (e, &label) in instances.iter().zip(labels) {
        let p = super::forward::bag_probability(params, e)?.p;
        let predicted_msi = p >= 0.5;
        if predicted_msi == label.is_positive() {
            correct += 1;
        }
        if label.is_positive() {
            msi_total += 1;
            if predicted_msi {
                msi_correct += 1;
            }
        }
    }
    let acc_overall = correct as f64 / labels.len() as f64;
    let acc_msi = if msi_total == 0 {
        0.0
    } else {
        msi_correct as f64 / msi_total as f64
    };
    Ok((acc_overall, acc_msi))
}
