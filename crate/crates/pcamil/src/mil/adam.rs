//! Bias-corrected ADAM.

use super::{MilConfig, MilError, MilGrads, MilParams};

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MilParams,
    v: MilParams,
    t: u64,
}

impl AdamState {
    pub fn new(cfg: &MilConfig) -> Self {
        AdamState {
            m: MilParams::zeros(cfg),
            v: MilParams::zeros(cfg),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One ADAM update over a flat parameter slice:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * mhat / (sqrt(vhat) + eps)`.
pub(crate) fn adam_update_slice(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert!(t >= 1);
    let bias1 = 1.0 - beta1.powi(t as i32);
    let bias2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one optimizer step in place and advances the step counter.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut MilParams,
    grads: &MilGrads,
    cfg: &MilConfig,
) -> Result<(), MilError> {
    if !params.matches_config(cfg) {
        return Err(MilError::ShapeMismatch(
            "parameters do not match the config".into(),
        ));
    }
    if params.w_f.dim() != grads.w_f.dim() || params.w5.len() != grads.w5.len() {
        return Err(MilError::ShapeMismatch(
            "gradients do not match the parameters".into(),
        ));
    }
    state.t += 1;
    let t = state.t;
    let (lr, b1, b2, eps) = (cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

    macro_rules! update {
        ($field:ident) => {
            adam_update_slice(
                params.$field.as_slice_mut().expect("standard layout"),
                grads.$field.as_slice().expect("standard layout"),
                state.m.$field.as_slice_mut().expect("standard layout"),
                state.v.$field.as_slice_mut().expect("standard layout"),
                t,
                lr,
                b1,
                b2,
                eps,
            )
        };
    }
    update!(w_f);
    update!(b_f);
    update!(w1);
    update!(w4);
    update!(w2);
    update!(w3);
    update!(w5);
    adam_update_slice(
        std::slice::from_mut(&mut params.b5),
        std::slice::from_ref(&grads.b5),
        std::slice::from_mut(&mut state.m.b5),
        std::slice::from_mut(&mut state.v.b5),
        t,
        lr,
        b1,
        b2,
        eps,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::init_params;

    fn cfg() -> MilConfig {
        MilConfig {
            d_hidden: 4,
            d_att: 3,
            seed: 1,
            ..MilConfig::for_input_dim(5)
        }
    }

    fn zero_grads(cfg: &MilConfig) -> MilGrads {
        let z = MilParams::zeros(cfg);
        MilGrads {
            w_f: z.w_f,
            b_f: z.b_f,
            w1: z.w1,
            w4: z.w4,
            w2: z.w2,
            w3: z.w3,
            w5: z.w5,
            b5: 0.0,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let cfg = cfg();
        let mut params = init_params(&cfg);
        let before = params.clone();
        let mut state = AdamState::new(&cfg);
        adam_step(&mut state, &mut params, &zero_grads(&cfg), &cfg).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // At t=1, mhat = g and vhat = g^2, so the update is
        // -lr * g / (|g| + eps) = -lr * sign(g) up to eps.
        let cfg = cfg();
        let mut params = init_params(&cfg);
        let before = params.clone();
        let mut grads = zero_grads(&cfg);
        grads.w_f.fill(3.7);
        grads.b5 = -0.2;
        let mut state = AdamState::new(&cfg);
        adam_step(&mut state, &mut params, &grads, &cfg).unwrap();
        for (after, orig) in params.w_f.iter().zip(before.w_f.iter()) {
            let delta = after - orig;
            assert!((delta + cfg.lr).abs() < 1e-9, "delta = {delta}");
        }
        assert!((params.b5 - before.b5 - cfg.lr).abs() < 1e-9);
        // Untouched tensors stay put.
        assert_eq!(params.w2, before.w2);
    }

    #[test]
    fn defaults_carry_the_configured_betas() {
        let cfg = MilConfig::for_input_dim(8);
        assert_eq!((cfg.beta1, cfg.beta2), (0.7, 0.99));
        assert_eq!(cfg.lr, 1e-4);
    }
}
