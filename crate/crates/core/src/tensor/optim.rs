use serde::{Deserialize, Serialize};

use super::l2_norm;
use crate::error::{check_len, Result};

/// Rescales `grad` in place so its 2-norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_by_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let n = l2_norm(grad);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    n
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("Adam params", self.m.len(), params.len())?;
        check_len("Adam grad", self.m.len(), grad.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => {
                check_len("Sgd grad", params.len(), grad.len())?;
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
                Ok(())
            }
            Optimizer::Adam(a) => a.step(params, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_only_when_needed() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_by_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_by_norm(&mut g, 1.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(l2_norm(&p) < 1e-2);
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0];
        Optimizer::Sgd { lr: 0.5 }.step(&mut p, &[2.0]).unwrap();
        assert_eq!(p, vec![0.0]);
    }
}
