//! Exact reverse-mode gradients of the full attention graph plus loss.
//!
//! The backward pass recomputes the forward intermediates it needs (the
//! public forward types do not carry pre-activations) using the same
//! formulas as `forward`, then chains derivatives tensor by tensor. The
//! gradient of the logit uses the unclamped sigmoid output; the clamp in
//! `bag_probability` only guards the logarithm.

use ndarray::{Array1, Array2, Axis};

use super::forward::{sigmoid, softmax_over_instances, BagOutput};
use super::{ClassWeights, MilError, MilParams};
use crate::data::Label;

/// Per-parameter gradients, shaped like [`MilParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MilGrads {
    pub w_f: Array2<f64>,
    pub b_f: Array1<f64>,
    pub w1: Array2<f64>,
    pub w4: Array2<f64>,
    pub w2: Array2<f64>,
    pub w3: Array2<f64>,
    pub w5: Array1<f64>,
    pub b5: f64,
}

/// Forward pass, loss, and gradients in one sweep.
pub fn loss_and_gradients(
    params: &MilParams,
    instances: &Array2<f64>,
    label: Label,
    alpha: f64,
    weights: &ClassWeights,
) -> Result<(BagOutput, f64, MilGrads), MilError> {
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
    if !(0.0..0.5).contains(&alpha) {
        return Err(MilError::DomainError(alpha));
    }

    let n_heads = params.w2.nrows();
    let d_hidden = params.w_f.nrows();

    // Forward, caching pre-activations.
    let z = instances.dot(&params.w_f.t()) + &params.b_f;
    let h = z.mapv(|v| v.max(0.0));
    let tanh_branch = h.dot(&params.w1.t()).mapv(f64::tanh);
    let gate_branch = h.dot(&params.w4.t()).mapv(sigmoid);
    let head_tanh = tanh_branch.dot(&params.w2.t());
    let head_gate = gate_branch.dot(&params.w3.t());
    let a_raw = &head_tanh * &head_gate;
    let attention = softmax_over_instances(&a_raw);
    let pooled = attention.t().dot(&h);
    let bag_vec = pooled
        .into_shape(n_heads * d_hidden)
        .map_err(|_| MilError::ShapeMismatch("pooled features do not match W5".into()))?;
    let logit = params.w5.dot(&bag_vec) + params.b5;
    if !logit.is_finite() {
        return Err(MilError::NonFiniteActivation);
    }
    let p_exact = sigmoid(logit);
    let p = p_exact.clamp(1e-15, 1.0 - 1e-15);
    let target = label.as_target() * (1.0 - alpha) + alpha / 2.0;
    let weight = weights.for_label(label);
    let loss = -weight * (target * p.ln() + (1.0 - target) * (1.0 - p).ln());

    // Backward.
    let d_logit = weight * (p_exact - target);
    let g_w5 = &bag_vec * d_logit;
    let g_b5 = d_logit;
    let d_bag = &params.w5 * d_logit;
    let d_pooled = d_bag
        .into_shape((n_heads, d_hidden))
        .expect("w5 length is n_heads * d_hidden");

    let d_attention = h.dot(&d_pooled.t());
    let mut d_h = attention.dot(&d_pooled);

    // Softmax over instances, independently per head.
    let k = instances.nrows();
    let mut d_a_raw = Array2::<f64>::zeros((k, n_heads));
    for j in 0..n_heads {
        let a_col = attention.column(j);
        let d_col = d_attention.column(j);
        let inner = a_col.dot(&d_col);
        for i in 0..k {
            d_a_raw[[i, j]] = a_col[i] * (d_col[i] - inner);
        }
    }

    let d_head_tanh = &d_a_raw * &head_gate;
    let d_head_gate = &d_a_raw * &head_tanh;
    let g_w2 = d_head_tanh.t().dot(&tanh_branch);
    let g_w3 = d_head_gate.t().dot(&gate_branch);
    let d_tanh = d_head_tanh.dot(&params.w2);
    let d_gate = d_head_gate.dot(&params.w3);

    let d_pre_tanh = &d_tanh * &tanh_branch.mapv(|t| 1.0 - t * t);
    let d_pre_gate = &d_gate * &gate_branch.mapv(|s| s * (1.0 - s));
    let g_w1 = d_pre_tanh.t().dot(&h);
    let g_w4 = d_pre_gate.t().dot(&h);
    d_h += &d_pre_tanh.dot(&params.w1);
    d_h += &d_pre_gate.dot(&params.w4);

    let d_z = &d_h * &z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let g_w_f = d_z.t().dot(instances);
    let g_b_f = d_z.sum_axis(Axis(0));

    let output = BagOutput {
        h,
        a_raw,
        attention,
        bag_vec,
        p,
    };
    let grads = MilGrads {
        w_f: g_w_f,
        b_f: g_b_f,
        w1: g_w1,
        w4: g_w4,
        w2: g_w2,
        w3: g_w3,
        w5: g_w5,
        b5: g_b5,
    };
    Ok((output, loss, grads))
}

/// Gradients of the loss with respect to every parameter.
pub fn gradients(
    params: &MilParams,
    instances: &Array2<f64>,
    label: Label,
    alpha: f64,
    weights: &ClassWeights,
) -> Result<MilGrads, MilError> {
    loss_and_gradients(params, instances, label, alpha, weights).map(|(_, _, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::{bag_probability, init_params, smoothed_weighted_bce, MilConfig};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg(seed: u64) -> MilConfig {
        MilConfig {
            d_hidden: 16,
            d_att: 8,
            seed,
            ..MilConfig::for_input_dim(12)
        }
    }

    fn random_instances(k: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array::from_shape_fn((k, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn classifier_bias_gradient_at_zero_logit() {
        // With W5 = 0 and b5 = 0, p = 0.5 and d loss/d b5 = w (0.5 - y').
        let cfg = tiny_cfg(0);
        let mut params = init_params(&cfg);
        params.w5.fill(0.0);
        params.b5 = 0.0;
        let e = random_instances(5, 12, 1);
        let weights = ClassWeights { msi: 1.7, mss: 0.3 };
        let alpha = 0.02;
        for label in [Label::Msi, Label::Mss] {
            let grads = gradients(&params, &e, label, alpha, &weights).unwrap();
            let target = label.as_target() * (1.0 - alpha) + alpha / 2.0;
            let expected = weights.for_label(label) * (0.5 - target);
            assert!((grads.b5 - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn dead_relu_unit_gets_zero_gradient() {
        let cfg = tiny_cfg(2);
        let mut params = init_params(&cfg);
        // Drive unit 0's pre-activation negative for every bounded input.
        params.b_f[0] = -100.0;
        let e = random_instances(6, 12, 3);
        let grads = gradients(&params, &e, Label::Msi, 0.0, &ClassWeights::uniform()).unwrap();
        assert!(grads.w_f.row(0).iter().all(|&g| g == 0.0));
        assert_eq!(grads.b_f[0], 0.0);
    }

    #[test]
    fn output_matches_bag_probability() {
        let cfg = tiny_cfg(4);
        let params = init_params(&cfg);
        let e = random_instances(4, 12, 5);
        let (out, loss, _) =
            loss_and_gradients(&params, &e, Label::Mss, 0.01, &ClassWeights::uniform()).unwrap();
        let direct = bag_probability(&params, &e).unwrap();
        assert_eq!(out.p, direct.p);
        let recomputed =
            smoothed_weighted_bce(direct.p, Label::Mss, 0.01, &ClassWeights::uniform()).unwrap();
        assert!((loss - recomputed).abs() < 1e-15);
    }

    /// Central finite differences over every parameter entry.
    fn finite_difference_check(seed: u64) -> f64 {
        let cfg = tiny_cfg(seed);
        let mut params = init_params(&cfg);
        let k = 3 + (seed as usize % 4);
        let e = random_instances(k, 12, seed ^ 0x5eed);
        let label = if seed % 2 == 0 { Label::Msi } else { Label::Mss };
        let alpha = 0.01 * (seed % 3) as f64;
        let weights = ClassWeights { msi: 1.4, mss: 0.6 };

        let analytic = gradients(&params, &e, label, alpha, &weights).unwrap();
        let step = 1e-5;
        let mut worst: f64 = 0.0;

        let eval = |params: &MilParams| -> f64 {
            let (_, loss, _) = loss_and_gradients(params, &e, label, alpha, &weights).unwrap();
            loss
        };

        macro_rules! fd_tensor {
            ($field:ident) => {{
                let n = params.$field.len();
                for flat in 0..n {
                    let orig = params.$field.as_slice_mut().unwrap()[flat];
                    params.$field.as_slice_mut().unwrap()[flat] = orig + step;
                    let up = eval(&params);
                    params.$field.as_slice_mut().unwrap()[flat] = orig - step;
                    let down = eval(&params);
                    params.$field.as_slice_mut().unwrap()[flat] = orig;
                    let numeric = (up - down) / (2.0 * step);
                    let exact = analytic.$field.as_slice().unwrap()[flat];
                    let rel = (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }};
        }
        fd_tensor!(w_f);
        fd_tensor!(b_f);
        fd_tensor!(w1);
        fd_tensor!(w4);
        fd_tensor!(w2);
        fd_tensor!(w3);
        fd_tensor!(w5);
        {
            let orig = params.b5;
            params.b5 = orig + step;
            let up = eval(&params);
            params.b5 = orig - step;
            let down = eval(&params);
            params.b5 = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel =
                (numeric - analytic.b5).abs() / analytic.b5.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [11u64, 12, 13] {
            let worst = finite_difference_check(seed);
            assert!(
                worst < 1e-4,
                "seed {seed}: max relative gradient error {worst:e}"
            );
        }
    }
}
