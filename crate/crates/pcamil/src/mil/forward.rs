//! Forward pass and loss.

use ndarray::{Array1, Array2, Axis};

use super::{ClassWeights, MilError, MilParams};
use crate::data::Label;

/// Probabilities are kept strictly inside (0,1) so the log loss stays
/// finite; the clamp only engages for |logit| beyond ~36.
const P_CLAMP: f64 = 1e-15;

/// Everything the forward pass produces for one bag.
#[derive(Debug, Clone)]
pub struct BagOutput {
    /// `k x d_hidden` instance features.
    pub h: Array2<f64>,
    /// `k x n_heads` raw attention scores.
    pub a_raw: Array2<f64>,
    /// `k x n_heads` attention weights; each column sums to one.
    pub attention: Array2<f64>,
    /// Flattened `n_heads x d_hidden` pooled features, head-major.
    pub bag_vec: Array1<f64>,
    /// MSI probability, strictly in (0,1).
    pub p: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `H = ReLU(E W_f^T + b_f)`, applied row-wise.
pub fn feature_mlp(params: &MilParams, instances: &Array2<f64>) -> Result<Array2<f64>, MilError> {
    if instances.ncols() != params.w_f.ncols() {
        return Err(MilError::ShapeMismatch(format!(
            "instances have {} features, W_f expects {}",
            instances.ncols(),
            params.w_f.ncols()
        )));
    }
    if instances.nrows() == 0 {
        return Err(MilError::ShapeMismatch("bag has no instances".into()));
    }
    let z = instances.dot(&params.w_f.t()) + &params.b_f;
    Ok(z.mapv(|v| v.max(0.0)))
}

/// Raw and softmax-normalized attention. Row `i` of the raw matrix is
/// `W2 tanh(W1 h_i) (*) W3 sigmoid(W4 h_i)`; the softmax runs over the
/// instance axis independently per head.
pub fn gated_attention(
    params: &MilParams,
    h: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>), MilError> {
    if h.ncols() != params.w1.ncols() {
        return Err(MilError::ShapeMismatch(format!(
            "H has width {}, attention expects {}",
            h.ncols(),
            params.w1.ncols()
        )));
    }
    let tanh_branch = h.dot(&params.w1.t()).mapv(f64::tanh);
    let gate_branch = h.dot(&params.w4.t()).mapv(sigmoid);
    let a_raw = tanh_branch.dot(&params.w2.t()) * gate_branch.dot(&params.w3.t());
    let attention = softmax_over_instances(&a_raw);
    Ok((a_raw, attention))
}

/// Column-wise stable softmax: each head's weights over the bag sum to 1.
pub(crate) fn softmax_over_instances(a_raw: &Array2<f64>) -> Array2<f64> {
    let mut out = a_raw.clone();
    for mut col in out.columns_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Full forward pass: feature MLP, gated attention, per-head pooling,
/// linear classifier, sigmoid.
pub fn bag_probability(params: &MilParams, instances: &Array2<f64>) -> Result<BagOutput, MilError> {
    let h = feature_mlp(params, instances)?;
    let (a_raw, attention) = gated_attention(params, &h)?;
    let pooled = attention.t().dot(&h);
    let bag_vec = pooled
        .into_shape(params.w5.len())
        .map_err(|_| MilError::ShapeMismatch("pooled features do not match W5".into()))?;
    let logit = params.w5.dot(&bag_vec) + params.b5;
    if !logit.is_finite() {
        return Err(MilError::NonFiniteActivation);
    }
    let p = sigmoid(logit).clamp(P_CLAMP, 1.0 - P_CLAMP);
    debug_assert!(attention
        .sum_axis(Axis(0))
        .iter()
        .all(|s| (s - 1.0).abs() <= 1e-9));
    Ok(BagOutput {
        h,
        a_raw,
        attention,
        bag_vec,
        p,
    })
}

/// Label-smoothed, class-weighted binary cross entropy.
///
/// The smoothed target is `y(1 - alpha) + alpha/2` with MSI = 1, and the
/// loss is scaled by the label's class weight.
pub fn smoothed_weighted_bce(
    p: f64,
    label: Label,
    alpha: f64,
    weights: &ClassWeights,
) -> Result<f64, MilError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MilError::DomainError(p));
    }
    if !(0.0..0.5).contains(&alpha) {
        return Err(MilError::DomainError(alpha));
    }
    let target = label.as_target() * (1.0 - alpha) + alpha / 2.0;
    let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    Ok(weights.for_label(label) * loss)
}
