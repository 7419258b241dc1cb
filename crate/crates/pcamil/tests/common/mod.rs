//! Shared test oracles, kept independent of the library's implementation
//! paths: the eigen oracle is a classical max-pivot Jacobi (the library
//! uses a cyclic sweep), and the gradient oracle is central finite
//! differences.

// Each integration-test binary uses its own subset of these helpers.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Axis};
use pcamil::data::Label;
use pcamil::mil::{gradients, loss_and_gradients, ClassWeights, MilParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Classical Jacobi eigendecomposition (largest off-diagonal pivot),
/// returning eigenpairs sorted by descending eigenvalue.
pub fn jacobi_eigen_oracle(matrix: &Array2<f64>) -> Vec<(f64, Array1<f64>)> {
    let n = matrix.nrows();
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..200 * n * n {
        // Largest off-diagonal element.
        let (mut p, mut q, mut best) = (0, 1, 0.0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                if a[[i, j]].abs() > best {
                    best = a[[i, j]].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if best < 1e-14 * (1.0 + a.diag().iter().map(|d| d.abs()).fold(0.0, f64::max)) {
            break;
        }
        let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..n {
            let akp = a[[k, p]];
            let akq = a[[k, q]];
            a[[k, p]] = c * akp - s * akq;
            a[[k, q]] = s * akp + c * akq;
        }
        for k in 0..n {
            let apk = a[[p, k]];
            let aqk = a[[q, k]];
            a[[p, k]] = c * apk - s * aqk;
            a[[q, k]] = s * apk + c * aqk;
        }
        for k in 0..n {
            let vkp = v[[k, p]];
            let vkq = v[[k, q]];
            v[[k, p]] = c * vkp - s * vkq;
            v[[k, q]] = s * vkp + c * vkq;
        }
    }
    let mut pairs: Vec<(f64, Array1<f64>)> =
        (0..n).map(|j| (a[[j, j]], v.column(j).to_owned())).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    pairs
}

/// Dense-route PCA oracle: center the bag, form the full `d x d` sample
/// covariance, eigendecompose it with the oracle solver, and return pairs
/// sorted by descending eigenvalue.
pub fn dense_pca_oracle(bag: &Array2<f64>) -> Vec<(f64, Array1<f64>)> {
    let n = bag.nrows();
    let mean = bag.mean_axis(Axis(0)).unwrap();
    let centered = bag - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    jacobi_eigen_oracle(&cov)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Random orthogonal matrix via Gram-Schmidt on Gaussian-ish columns.
pub fn random_orthogonal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut basis = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut v = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0f64));
        for _ in 0..2 {
            for k in 0..j {
                let col = basis.column(k).to_owned();
                let proj = col.dot(&v);
                v.scaled_add(-proj, &col);
            }
        }
        let norm = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / norm);
        basis.column_mut(j).assign(&v);
    }
    basis
}

/// Max relative error between analytic gradients and central finite
/// differences over every parameter entry of a model.
pub fn gradient_check(
    params: &mut MilParams,
    instances: &Array2<f64>,
    label: Label,
    alpha: f64,
    weights: &ClassWeights,
) -> f64 {
    let analytic = gradients(params, instances, label, alpha, weights).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let eval = |p: &MilParams| -> f64 {
        loss_and_gradients(p, instances, label, alpha, weights)
            .unwrap()
            .1
    };

    macro_rules! fd_tensor {
        ($field:ident) => {{
            for flat in 0..params.$field.len() {
                let orig = params.$field.as_slice_mut().unwrap()[flat];
                params.$field.as_slice_mut().unwrap()[flat] = orig + step;
                let up = eval(params);
                params.$field.as_slice_mut().unwrap()[flat] = orig - step;
                let down = eval(params);
                params.$field.as_slice_mut().unwrap()[flat] = orig;
                let numeric = (up - down) / (2.0 * step);
                let exact = analytic.$field.as_slice().unwrap()[flat];
                let rel = (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
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
        let up = eval(params);
        params.b5 = orig - step;
        let down = eval(params);
        params.b5 = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (numeric - analytic.b5).abs() / analytic.b5.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
