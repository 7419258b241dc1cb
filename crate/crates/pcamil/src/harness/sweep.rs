//! Validation-fold hyperparameter sweeps.
//!
//! Sweeps run cross-validation on the training manifest only and score each
//! fold's model on its held-out validation fold; this code path never
//! receives a test manifest handle, so test leakage is ruled out by
//! construction. The swept model is the full clinically-informed one
//! (PCA embedding, MIL network, side prior), matching how the operating
//! point was chosen in the experiment this harness reproduces.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use super::{derive_seed, ExperimentConfig, HarnessError};
use crate::data::Label;
use crate::metrics::{binary_report, ScoredCohort};
use crate::mil::{bag_probability, train_fold, CheckpointRule, MilConfig};
use crate::pca::{patient_embedding, EigenBasis};
use crate::prior::{apply_prior, PriorConfig};

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepAxis {
    KEigenvectors,
    Alpha,
    Beta,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s.trim().to_ascii_lowercase().as_str() {
            "k_eigenvectors" | "k" => Some(SweepAxis::KEigenvectors),
            "alpha" | "label_smoothing" => Some(SweepAxis::Alpha),
            "beta" => Some(SweepAxis::Beta),
            _ => None,
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::KEigenvectors => "k_eigenvectors",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
        })
    }
}

/// Mean validation metrics for one swept value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_f1: f64,
    pub mean_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

/// Runs the sweep: for each value, stratified CV on the training manifest,
/// scoring each fold's clinically-informed MIL model on its validation fold
/// and averaging F1 and Cohen's kappa over the folds.
pub fn hyperparameter_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<SweepTable, HarnessError> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep value list is empty".into()));
    }
    for &v in values {
        let ok = match axis {
            SweepAxis::KEigenvectors => v >= 1.0 && v.fract() == 0.0,
            SweepAxis::Alpha => (0.0..0.5).contains(&v),
            SweepAxis::Beta => v > 0.0 && v <= 1.0,
        };
        if !ok {
            return Err(HarnessError::InvalidConfig(format!(
                "value {v} is invalid for axis {axis}"
            )));
        }
    }

    let train = super::experiment::load_training_split(cfg)?;
    let labels: Vec<Label> = train.manifest.labels();
    let folds = super::stratified_kfold(&labels, cfg.n_folds, cfg.seed)?;

    // Embed once at the largest k the sweep needs; smaller k values reuse
    // truncations of the same spectra.
    let k_max = match axis {
        SweepAxis::KEigenvectors => values.iter().fold(0.0f64, |a, &b| a.max(b)) as usize,
        _ => cfg.k_eigenvectors,
    };
    let embeddings: Vec<EigenBasis> = train
        .bags
        .iter()
        .map(|b| patient_embedding(b, k_max, cfg.eps_rank).map_err(HarnessError::from))
        .collect::<Result<_, _>>()?;

    let mut mil_cfg = cfg.mil.clone();
    if mil_cfg.d_in == 0 {
        mil_cfg.d_in = train.feature_dim;
    }
    mil_cfg.label_smoothing = cfg.alpha;

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let (k, alpha, prior) = match axis {
            SweepAxis::KEigenvectors => (value as usize, cfg.alpha, cfg.prior),
            SweepAxis::Alpha => (cfg.k_eigenvectors, value, cfg.prior),
            SweepAxis::Beta => (
                cfg.k_eigenvectors,
                cfg.alpha,
                PriorConfig {
                    beta: value,
                    ..cfg.prior
                },
            ),
        };
        let truncated: Vec<EigenBasis> =
            embeddings.iter().map(|e| e.truncated(k)).collect();

        let mut f1_sum = 0.0;
        let mut kappa_sum = 0.0;
        for (fold_idx, fold) in folds.iter().enumerate() {
            let mut held = vec![false; labels.len()];
            for &i in fold {
                held[i] = true;
            }
            let train_bags: Vec<(EigenBasis, Label)> = (0..labels.len())
                .filter(|&i| !held[i])
                .map(|i| (truncated[i].clone(), labels[i]))
                .collect();
            let fold_cfg = MilConfig {
                seed: derive_seed(cfg.seed, 3000 + fold_idx as u64),
                label_smoothing: alpha,
                ..mil_cfg.clone()
            };
            let (params, _) = train_fold(&train_bags, &fold_cfg, &CheckpointRule::default())?;

            let mut ids = Vec::with_capacity(fold.len());
            let mut val_labels = Vec::with_capacity(fold.len());
            let mut scores = Vec::with_capacity(fold.len());
            for &i in fold {
                let instances =
                    truncated[i].instances(fold_cfg.scale_instances_by_eigenvalue);
                let p = bag_probability(&params, &instances)?.p;
                ids.push(train.manifest.records[i].patient_id.clone());
                val_labels.push(labels[i]);
                scores.push(apply_prior(p, train.manifest.records[i].side, &prior));
            }
            let cohort = ScoredCohort::new(ids, val_labels, scores)?;
            let report = binary_report(&cohort, cfg.threshold);
            f1_sum += report.f1;
            kappa_sum += report.kappa;
        }
        rows.push(SweepRow {
            value,
            mean_f1: f1_sum / folds.len() as f64,
            mean_kappa: kappa_sum / folds.len() as f64,
        });
    }

    Ok(SweepTable { axis, rows })
}

/// Writes the sweep table as `axis,value,mean_f1,mean_kappa`.
pub fn write_sweep_csv(table: &SweepTable, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from("axis,value,mean_f1,mean_kappa\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            table.axis, row.value, row.mean_f1, row.mean_kappa
        ));
    }
    std::fs::write(path, out).map_err(HarnessError::Io)
}

