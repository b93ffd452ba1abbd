//! Softmax-Bayes belief dynamics and their Jacobians.
//!
//! An observer's posterior over the shaper's role is updated as
//! `b' = Reg(softmax(ell / tau + log b))`, where `Reg` mixes the result with
//! the uniform distribution. Everything downstream (shaping gradients,
//! coefficient surrogates, bound checks) is expressed through the functions
//! here.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{check_len, DbosError, Result};
use crate::tensor::Mat64;

/// Lower clamp for log action probabilities before they enter a belief update.
pub const LOG_PROB_FLOOR: f64 = -30.0;

/// Tolerance used when validating that an input lies on the simplex.
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stabilization {
    /// Likelihood temperature, `ell` is divided by this before the update.
    pub temperature: f64,
    /// Weight of the uniform mixture applied after every update.
    pub alpha_floor: f64,
}

impl Default for Stabilization {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            alpha_floor: 0.05,
        }
    }
}

impl Stabilization {
    pub fn new(temperature: f64, alpha_floor: f64) -> Result<Self> {
        let s = Self {
            temperature,
            alpha_floor,
        };
        s.validate()?;
        Ok(s)
    }

    /// Plain Bayes: no temperature, no floor.
    pub fn exact() -> Self {
        Self {
            temperature: 1.0,
            alpha_floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 1.0) || !self.temperature.is_finite() {
            return Err(DbosError::Config(format!(
                "temperature must be >= 1, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.alpha_floor) {
            return Err(DbosError::Config(format!(
                "alpha_floor must be in [0, 1), got {}",
                self.alpha_floor
            )));
        }
        Ok(())
    }

    /// Smallest entry any floored belief over `n_roles` roles can take.
    pub fn b_min(&self, n_roles: usize) -> f64 {
        self.alpha_floor / n_roles as f64
    }
}

/// Numerically stable softmax. Entries equal to `-inf` map to exactly zero;
/// an all `-inf` input yields the uniform distribution.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![1.0 / x.len() as f64; x.len()];
    }
    let mut e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(b: &[f64]) -> f64 {
    -b.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn validate_belief(b: &[f64]) -> Result<()> {
    if b.is_empty() {
        return Err(DbosError::Data("empty belief vector".into()));
    }
    if b.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DbosError::Data(format!("belief has negative or non-finite entry: {b:?}")));
    }
    let s: f64 = b.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(DbosError::Data(format!("belief sums to {s}, not 1")));
    }
    Ok(())
}

fn floor_mix(p: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return p.to_vec();
    }
    let u = alpha / p.len() as f64;
    p.iter().map(|v| (1.0 - alpha) * v + u).collect()
}

/// One update, returning both the raw softmax posterior and the floored belief.
pub fn softmax_bayes_step_parts(
    prior: &[f64],
    ell: &[f64],
    stab: &Stabilization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("softmax_bayes_step", prior.len(), ell.len())?;
    if let Some(i) = ell.iter().position(|v| !v.is_finite()) {
        return Err(DbosError::NonFinite {
            context: "log-likelihood",
            coordinate: i,
        });
    }
    let logits: Vec<f64> = ell
        .iter()
        .zip(prior)
        .map(|(l, b)| l / stab.temperature + b.ln())
        .collect();
    let p = softmax(&logits);
    let b = floor_mix(&p, stab.alpha_floor);
    Ok((p, b))
}

/// `Reg(softmax(ell / tau + log prior))`.
pub fn softmax_bayes_step(prior: &[f64], ell: &[f64], stab: &Stabilization) -> Result<Vec<f64>> {
    validate_belief(prior)?;
    Ok(softmax_bayes_step_parts(prior, ell, stab)?.1)
}

/// `diag(b) - b bᵀ`, the Jacobian of a softmax output `b` with respect to its logits.
pub fn softmax_jacobian(b: &[f64]) -> Mat64 {
    let n = b.len();
    let mut m = Mat64::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { b[i] } else { 0.0 };
            m.set(i, j, d - b[i] * b[j]);
        }
    }
    m
}

/// Induced `l1 -> l1` norm: the largest column absolute sum.
pub fn operator_norm_1to1(m: &Mat64) -> f64 {
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// One belief row per observer, all over the same role set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefMatrix {
    n_roles: usize,
    observers: Vec<usize>,
    data: Vec<f64>,
}

impl BeliefMatrix {
    pub fn uniform(observers: &[usize], n_roles: usize) -> Self {
        Self {
            n_roles,
            observers: observers.to_vec(),
            data: vec![1.0 / n_roles as f64; observers.len() * n_roles],
        }
    }

    pub fn from_rows(observers: &[usize], rows: &[Vec<f64>]) -> Result<Self> {
        check_len("BeliefMatrix rows", observers.len(), rows.len())?;
        let n_roles = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * n_roles);
        for r in rows {
            check_len("BeliefMatrix row", n_roles, r.len())?;
            validate_belief(r)?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            n_roles,
            observers: observers.to_vec(),
            data,
        })
    }

    /// Builds from a flattened row-major buffer without simplex validation.
    pub fn from_flat(observers: &[usize], n_roles: usize, data: Vec<f64>) -> Result<Self> {
        check_len("BeliefMatrix flat", observers.len() * n_roles, data.len())?;
        Ok(Self {
            n_roles,
            observers: observers.to_vec(),
            data,
        })
    }

    pub fn n_roles(&self) -> usize {
        self.n_roles
    }

    pub fn n_observers(&self) -> usize {
        self.observers.len()
    }

    pub fn observers(&self) -> &[usize] {
        &self.observers
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_roles..(j + 1) * self.n_roles]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_roles..(j + 1) * self.n_roles]
    }

    /// Row-major flattening, the critic's belief input.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn reset_uniform(&mut self) {
        let u = 1.0 / self.n_roles as f64;
        self.data.iter_mut().for_each(|v| *v = u);
    }

    /// Applies one update per row with that row's likelihood vector.
    pub fn update(&mut self, ells: &[Vec<f64>], stab: &Stabilization) -> Result<()> {
        check_len("BeliefMatrix::update", self.n_observers(), ells.len())?;
        for (j, ell) in ells.iter().enumerate() {
            let (_, b) = softmax_bayes_step_parts(self.row(j), ell, stab)?;
            self.row_mut(j).copy_from_slice(&b);
        }
        Ok(())
    }

    /// Appends one JSON line per observer row.
    pub fn write_jsonl<W: Write>(&self, w: &mut W, env_id: usize, step: usize) -> Result<()> {
        for j in 0..self.n_observers() {
            let rec = serde_json::json!({
                "env": env_id,
                "step": step,
                "observer": self.observers[j],
                "belief": self.row(j),
            });
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A recorded k-step unroll of row-wise belief updates.
///
/// Index `s` in `0..k` refers to the update that consumes `ells[s]` and
/// produces `beliefs[s]` (the belief after `s + 1` updates).
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefChainTape {
    pub start: BeliefMatrix,
    /// `[step][observer][role]`
    pub ells: Vec<Vec<Vec<f64>>>,
    /// Softmax outputs before the floor mix, per step.
    pub pre_floor: Vec<BeliefMatrix>,
    /// Floored beliefs after each step.
    pub beliefs: Vec<BeliefMatrix>,
    pub stab: Stabilization,
}

pub fn unroll_chain(
    start: &BeliefMatrix,
    ells: &[Vec<Vec<f64>>],
    k: usize,
    stab: &Stabilization,
) -> Result<BeliefChainTape> {
    if k == 0 {
        return Err(DbosError::Config("chain length k must be >= 1".into()));
    }
    check_len("unroll_chain steps", k, ells.len())?;
    stab.validate()?;
    let mut cur = start.clone();
    let mut pre_floor = Vec::with_capacity(k);
    let mut beliefs = Vec::with_capacity(k);
    for step in ells {
        check_len("unroll_chain observers", start.n_observers(), step.len())?;
        let mut p_mat = cur.clone();
        for (j, ell) in step.iter().enumerate() {
            check_len("unroll_chain roles", start.n_roles(), ell.len())?;
            let (p, b) = softmax_bayes_step_parts(cur.row(j), ell, stab)?;
            p_mat.row_mut(j).copy_from_slice(&p);
            cur.row_mut(j).copy_from_slice(&b);
        }
        pre_floor.push(p_mat);
        beliefs.push(cur.clone());
    }
    Ok(BeliefChainTape {
        start: start.clone(),
        ells: ells.to_vec(),
        pre_floor,
        beliefs,
        stab: *stab,
    })
}

/// Vector-Jacobian product through a whole tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainGrad {
    /// `dL/d ell[step][observer][role]`
    pub d_ell: Vec<Vec<Vec<f64>>>,
    /// `dL/d start`, flattened like [`BeliefMatrix::as_flat`].
    pub d_start: Vec<f64>,
}

impl BeliefChainTape {
    pub fn k(&self) -> usize {
        self.ells.len()
    }

    pub fn endpoint(&self) -> &BeliefMatrix {
        self.beliefs.last().expect("tape has k >= 1 steps")
    }

    /// Belief before step `s` (the start belief for `s = 0`).
    pub fn belief_before(&self, s: usize) -> &BeliefMatrix {
        if s == 0 {
            &self.start
        } else {
            &self.beliefs[s - 1]
        }
    }

    /// Re-runs the updates from the stored inputs.
    pub fn replay(&self) -> Result<BeliefChainTape> {
        unroll_chain(&self.start, &self.ells, self.k(), &self.stab)
    }

    /// Backpropagates `upstream = dL/d endpoint` to the log-likelihoods and start belief.
    pub fn backward(&self, upstream: &[f64]) -> Result<ChainGrad> {
        let nz = self.start.n_roles();
        let m = self.start.n_observers();
        check_len("BeliefChainTape::backward", m * nz, upstream.len())?;
        let k = self.k();
        let a = self.stab.alpha_floor;
        let tau = self.stab.temperature;
        let mut d_ell = vec![vec![vec![0.0; nz]; m]; k];
        let mut d_start = vec![0.0; m * nz];
        for j in 0..m {
            let mut g = upstream[j * nz..(j + 1) * nz].to_vec();
            for s in (0..k).rev() {
                let p = self.pre_floor[s].row(j);
                let prior = self.belief_before(s).row(j);
                // through the floor mix, then the softmax
                let gp: Vec<f64> = g.iter().map(|v| (1.0 - a) * v).collect();
                let pg: f64 = p.iter().zip(&gp).map(|(x, y)| x * y).sum();
                let gx: Vec<f64> = p.iter().zip(&gp).map(|(pi, gi)| pi * (gi - pg)).collect();
                for z in 0..nz {
                    d_ell[s][j][z] = gx[z] / tau;
                }
                g = gx
                    .iter()
                    .zip(prior)
                    .map(|(gxi, bi)| if *bi > 0.0 { gxi / bi } else { 0.0 })
                    .collect();
            }
            d_start[j * nz..(j + 1) * nz].copy_from_slice(&g);
        }
        Ok(ChainGrad { d_ell, d_start })
    }

    fn check_positive(b: &[f64], what: &str) -> Result<()> {
        if b.iter().any(|v| *v <= 0.0) {
            return Err(DbosError::Singular(format!("{what} has a zero entry: {b:?}")));
        }
        Ok(())
    }

    /// `d b_{s+1} / d b_s` for observer `j`: `(1 - alpha) (diag(p) - p pᵀ) diag(b_s)^-1`.
    pub fn step_jacobian(&self, j: usize, s: usize) -> Result<Mat64> {
        let prior = self.belief_before(s).row(j);
        Self::check_positive(prior, "prior belief")?;
        let sp = softmax_jacobian(self.pre_floor[s].row(j));
        let n = prior.len();
        let mut out = Mat64::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                out.set(r, c, (1.0 - self.stab.alpha_floor) * sp.get(r, c) / prior[c]);
            }
        }
        Ok(out)
    }

    /// `d b_{s+1} / d ell_s` for observer `j`.
    pub fn ell_jacobian(&self, j: usize, s: usize) -> Mat64 {
        let scale = (1.0 - self.stab.alpha_floor) / self.stab.temperature;
        softmax_jacobian(self.pre_floor[s].row(j)).scale(scale)
    }
}

/// Explicit product `d b_k / d b_{s+1}` for observer `j`, multiplying the
/// per-step Jacobians from step `s + 1` up to the endpoint. Identity when
/// `s = k - 1`.
pub fn chain_jacobian_naive(tape: &BeliefChainTape, j: usize, s: usize) -> Result<Mat64> {
    let k = tape.k();
    if s >= k {
        return Err(DbosError::Config(format!("step {s} outside chain of length {k}")));
    }
    let mut pi = Mat64::identity(tape.start.n_roles());
    for r in s + 1..k {
        pi = tape.step_jacobian(j, r)?.matmul(&pi)?;
    }
    Ok(pi)
}

/// Closed form `D_end (I - 1 b_endᵀ) D_start^-1 = (diag(b_end) - b_end b_endᵀ) diag(b_start)^-1`.
///
/// Equals the explicit chain product for unfloored, untempered updates
/// whenever the chain has at least one step; for an empty chain only the
/// product with the next softmax Jacobian agrees.
pub fn chain_jacobian_closed(b_end: &[f64], b_start: &[f64]) -> Result<Mat64> {
    check_len("chain_jacobian_closed", b_end.len(), b_start.len())?;
    BeliefChainTape::check_positive(b_start, "start belief")?;
    let s = softmax_jacobian(b_end);
    let n = b_end.len();
    let mut out = Mat64::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            out.set(r, c, s.get(r, c) / b_start[c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn equal_evidence_preserves_prior() {
        let l = 0.3f64.ln();
        let b = softmax_bayes_step(&[0.5, 0.5], &[l, l], &Stabilization::exact()).unwrap();
        assert!(close(&b, &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn hand_bayes_examples() {
        let st = Stabilization::exact();
        let b = softmax_bayes_step(&[0.5, 0.5], &[0.8f64.ln(), 0.2f64.ln()], &st).unwrap();
        assert!(close(&b, &[0.8, 0.2], 1e-14));
        let b = softmax_bayes_step(&[0.9, 0.1], &[0.5f64.ln(), 1.0f64.ln()], &st).unwrap();
        assert!(close(&b, &[0.45 / 0.55, 0.10 / 0.55], 1e-14));
    }

    #[test]
    fn floor_mix_arithmetic() {
        let st = Stabilization::new(1.0, 0.1).unwrap();
        let b = softmax_bayes_step(&[0.99, 0.01], &[0.0, 0.0], &st).unwrap();
        assert!(close(&b, &[0.941, 0.059], 1e-14));
    }

    #[test]
    fn non_finite_likelihood_is_rejected() {
        let r = softmax_bayes_step(&[0.5, 0.5], &[f64::NAN, 0.0], &Stabilization::exact());
        assert!(matches!(r, Err(DbosError::NonFinite { coordinate: 0, .. })));
    }

    #[test]
    fn bad_stabilization_is_rejected() {
        assert!(Stabilization::new(0.5, 0.0).is_err());
        assert!(Stabilization::new(1.0, 1.0).is_err());
        assert!(Stabilization::new(1.0, -0.1).is_err());
    }

    #[test]
    fn softmax_jacobian_examples() {
        let j = softmax_jacobian(&[0.5, 0.5]);
        assert_eq!(j, Mat64::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]).unwrap());
        assert_eq!(softmax_jacobian(&[1.0, 0.0]), Mat64::zeros(2, 2));
        let j = softmax_jacobian(&[0.2, 0.3, 0.5]);
        for c in j.column_sums() {
            assert!(c.abs() < 1e-15);
        }
    }

    #[test]
    fn operator_norm_examples() {
        assert_eq!(operator_norm_1to1(&Mat64::identity(3)), 1.0);
        let m = Mat64::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(operator_norm_1to1(&m), 6.0);
        assert_eq!(operator_norm_1to1(&Mat64::zeros(2, 2)), 0.0);
    }

    #[test]
    fn closed_form_uniform_example() {
        let m = chain_jacobian_closed(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(m, Mat64::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]).unwrap());
        assert!(matches!(chain_jacobian_closed(&[0.5, 0.5], &[1.0, 0.0]), Err(DbosError::Singular(_))));
    }

    #[test]
    fn k1_unroll_is_one_step() {
        let start = BeliefMatrix::from_rows(&[1, 2], &[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let ells = vec![vec![vec![-0.1, -2.0], vec![-1.0, -0.5]]];
        let st = Stabilization::default();
        let tape = unroll_chain(&start, &ells, 1, &st).unwrap();
        for j in 0..2 {
            let b = softmax_bayes_step(start.row(j), &ells[0][j], &st).unwrap();
            assert_eq!(tape.endpoint().row(j), b.as_slice());
        }
        assert!(unroll_chain(&start, &ells, 2, &st).is_err());
    }

    #[test]
    fn replay_is_bit_exact() {
        let start = BeliefMatrix::uniform(&[0], 3);
        let ells = vec![vec![vec![-0.1, -2.0, -0.3]], vec![vec![-1.0, -0.5, -4.0]]];
        let tape = unroll_chain(&start, &ells, 2, &Stabilization::default()).unwrap();
        assert_eq!(tape.replay().unwrap(), tape);
    }

    #[test]
    fn empty_chain_is_identity() {
        let start = BeliefMatrix::uniform(&[0], 3);
        let ells = vec![vec![vec![-0.1, -2.0, -0.3]]];
        let tape = unroll_chain(&start, &ells, 1, &Stabilization::exact()).unwrap();
        assert_eq!(chain_jacobian_naive(&tape, 0, 0).unwrap(), Mat64::identity(3));
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.999, 0.001]) - 0.0079074).abs() < 1e-6);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn belief_jsonl_lines() {
        let b = BeliefMatrix::uniform(&[2, 3], 2);
        let mut out = Vec::new();
        b.write_jsonl(&mut out, 4, 9).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["observer"], 3);
        assert_eq!(v["env"], 4);
    }
}
