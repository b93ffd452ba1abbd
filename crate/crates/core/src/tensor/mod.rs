//! Dense 64-bit numerics: vectors, matrices, flat parameter storage, a tanh
//! perceptron with an analytic backward pass, optimizers, checkpoints and a
//! central finite-difference oracle.
//!
//! Everything here is hand-derived; there is no computation graph. Callers
//! that need a gradient call the matching `*_backward` function explicitly.

mod checkpoint;
mod matrix;
mod mlp;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use matrix::Mat64;
pub use mlp::{
    mlp_backward, mlp_backward_into, mlp_forward, mlp_forward_cached, Activation, MlpCache,
    MlpSpec,
};
pub use optim::{clip_by_norm, Adam, Optimizer};
pub use params::{ParamEntry, ParamVector};

use crate::error::{DbosError, Result};

/// Plain 64-bit vector. Length checks happen at the API that consumes it.
pub type Vec64 = Vec<f64>;

/// Dot product with four independent accumulators.
///
/// The fixed lane split keeps the summation order deterministic while letting
/// the compiler vectorize the loop.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn l1_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

pub fn linf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Central-difference gradient `(f(p + s e_i) - f(p - s e_i)) / 2s`.
///
/// A non-finite function value aborts with the offending coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(DbosError::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p);
        p[i] = orig - step;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DbosError::NonFinite {
                context: "finite_diff_grad",
                coordinate: i,
            });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Worst coordinate-wise relative error between two gradients.
///
/// Each coordinate is compared as `|a - b| / max(|a|, |b|, floor)`, so
/// coordinates whose true magnitude is below `floor` are judged on absolute
/// error scaled by `1/floor`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_constant_is_zero() {
        let g = finite_diff_grad(|_| 3.5, &[1.0, -2.0, 0.25], 1e-6).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn fd_of_quadratic() {
        let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_reports_non_finite_coordinate() {
        let err = finite_diff_grad(|p| if p[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3)
            .unwrap_err();
        match err {
            DbosError::NonFinite { coordinate, .. } => assert_eq!(coordinate, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fd_rejects_bad_step() {
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.0).is_err());
        assert!(finite_diff_grad(|_| 0.0, &[0.0], -1.0).is_err());
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
