//! Threshold-free and thresholded evaluation metrics with exact
//! small-cohort semantics. MSI is the positive class throughout.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::Label;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("parallel lists have mismatched lengths")]
    LengthMismatch,
    #[error("score {0} is not a probability in [0,1]")]
    InvalidScore(f64),
    #[error("cohort needs at least one member of each class")]
    SingleClassCohort,
    #[error("cohort has no positive members")]
    NoPositives,
    #[error("need at least two folds")]
    TooFewFolds,
}

/// Parallel per-patient ids, labels, and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCohort {
    patient_ids: Vec<String>,
    labels: Vec<Label>,
    scores: Vec<f64>,
}

impl ScoredCohort {
    pub fn new(
        patient_ids: Vec<String>,
        labels: Vec<Label>,
        scores: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        if patient_ids.len() != labels.len() || labels.len() != scores.len() {
            return Err(MetricsError::LengthMismatch);
        }
        for &s in &scores {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(MetricsError::InvalidScore(s));
            }
        }
        Ok(ScoredCohort {
            patient_ids,
            labels,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }
}

/// Confusion counts at a fixed threshold (MSI positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tpc: usize,
    pub fpc: usize,
    pub fnc: usize,
    pub tnc: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tpc + self.fpc + self.fnc + self.tnc
    }
}

/// Thresholded summary: counts plus accuracy, F1, and Cohen's kappa.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub f1: f64,
    pub kappa: f64,
}

/// AUROC as the Mann-Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties credited one half. Computed from
/// midranks, which is algebraically the same thing.
pub fn roc_auc(cohort: &ScoredCohort) -> Result<f64, MetricsError> {
    let n_pos = cohort.n_positive();
    let n_neg = cohort.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClassCohort);
    }

    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.sort_by(|&a, &b| {
        cohort.scores[a]
            .partial_cmp(&cohort.scores[b])
            .expect("scores validated finite")
    });

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && cohort.scores[order[j]] == cohort.scores[order[i]] {
            j += 1;
        }
        // 1-based midrank shared by the tie group [i, j).
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if cohort.labels[idx].is_positive() {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision. Equal-score groups are processed as blocks,
/// contributing (recall gained) x (precision at block end).
pub fn average_precision(cohort: &ScoredCohort) -> Result<f64, MetricsError> {
    let n_pos = cohort.n_positive();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }

    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.sort_by(|&a, &b| {
        cohort.scores[b]
            .partial_cmp(&cohort.scores[a])
            .expect("scores validated finite")
    });

    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut block_tp = 0usize;
        while j < order.len() && cohort.scores[order[j]] == cohort.scores[order[i]] {
            if cohort.labels[order[j]].is_positive() {
                block_tp += 1;
            }
            j += 1;
        }
        tp += block_tp;
        seen = j;
        if block_tp > 0 {
            let precision = tp as f64 / seen as f64;
            let delta_recall = block_tp as f64 / n_pos as f64;
            ap += delta_recall * precision;
        }
        i = j;
    }
    debug_assert_eq!(seen, cohort.len());
    Ok(ap)
}

/// Thresholded metrics: predict MSI iff score >= threshold.
///
/// Degenerate conventions: F1 is 0 when its denominator vanishes; kappa is 1
/// when expected agreement is 1 and observed agreement is perfect, else 0.
pub fn binary_report(cohort: &ScoredCohort, threshold: f64) -> BinaryReport {
    let mut counts = ConfusionCounts {
        tpc: 0,
        fpc: 0,
        fnc: 0,
        tnc: 0,
    };
    for (&label, &score) in cohort.labels.iter().zip(&cohort.scores) {
        let predicted_msi = score >= threshold;
        match (predicted_msi, label.is_positive()) {
            (true, true) => counts.tpc += 1,
            (true, false) => counts.fpc += 1,
            (false, true) => counts.fnc += 1,
            (false, false) => counts.tnc += 1,
        }
    }
    report_from_counts(counts)
}

pub fn report_from_counts(counts: ConfusionCounts) -> BinaryReport {
    let n = counts.total();
    let accuracy = if n == 0 {
        0.0
    } else {
        (counts.tpc + counts.tnc) as f64 / n as f64
    };
    let f1_denom = 2 * counts.tpc + counts.fpc + counts.fnc;
    let f1 = if f1_denom == 0 {
        0.0
    } else {
        2.0 * counts.tpc as f64 / f1_denom as f64
    };

    let pred_pos = counts.tpc + counts.fpc;
    let pred_neg = counts.fnc + counts.tnc;
    let actual_pos = counts.tpc + counts.fnc;
    let actual_neg = counts.fpc + counts.tnc;
    // Integer comparison keeps the p_e == 1 test exact.
    let pe_num = pred_pos * actual_pos + pred_neg * actual_neg;
    let kappa = if pe_num == n * n {
        if counts.fpc + counts.fnc == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        let p_o = accuracy;
        let p_e = pe_num as f64 / (n * n) as f64;
        (p_o - p_e) / (1.0 - p_e)
    };

    BinaryReport {
        counts,
        accuracy,
        f1,
        kappa,
    }
}

/// Mean, sample standard deviation, and a t-based 95% confidence interval
/// over per-fold metric values, optionally clipped to the metric's range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FoldAggregate {
    pub mean: f64,
    pub sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn aggregate_folds(
    values: &[f64],
    clip: Option<(f64, f64)>,
) -> Result<FoldAggregate, MetricsError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::TooFewFolds);
    }
    if values.windows(2).all(|w| w[0] == w[1]) {
        // Exact degenerate case: zero spread, zero-width interval.
        return Ok(FoldAggregate {
            mean: values[0],
            sd: 0.0,
            ci_lo: values[0],
            ci_hi: values[0],
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof")
        .inverse_cdf(0.975);
    let margin = t * sd / (n as f64).sqrt();
    let (mut lo, mut hi) = (mean - margin, mean + margin);
    if let Some((min, max)) = clip {
        lo = lo.clamp(min, max);
        hi = hi.clamp(min, max);
    }
    Ok(FoldAggregate {
        mean,
        sd,
        ci_lo: lo,
        ci_hi: hi,
    })
}
