//! Empirical checks of the belief-dynamics bounds.
//!
//! Every suite returns a [`BoundReport`]: one entry per measured quantity with
//! the bound it must respect. A trial is a violation when the measurement
//! exceeds the bound by more than [`SLACK`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{
    chain_jacobian_closed, chain_jacobian_naive, softmax, softmax_jacobian, unroll_chain, BeliefChainTape,
    BeliefMatrix, Stabilization,
};
use crate::error::{DbosError, Result};
use crate::policy::PolicyArch;
use crate::tensor::{finite_diff_grad, l1_norm, l2_norm, linf_norm, max_rel_error, Mat64};

/// Absolute rounding allowance on every comparison.
pub const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub check: String,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub violation: bool,
    pub n_roles: usize,
    pub k: Option<usize>,
    pub eps: Option<f64>,
    pub b_min: Option<f64>,
    /// Measured constants that entered the bound.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, f64>,
}

impl BoundTrial {
    pub fn new(check: &str, measured: f64, bound: f64, n_roles: usize) -> Self {
        Self {
            check: check.to_string(),
            measured,
            bound,
            margin: bound - measured,
            violation: !(measured <= bound + SLACK),
            n_roles,
            k: None,
            eps: None,
            b_min: None,
            constants: BTreeMap::new(),
        }
    }

    fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    fn with_eps(mut self, eps: f64) -> Self {
        self.eps = Some(eps);
        self
    }

    fn with_b_min(mut self, b: f64) -> Self {
        self.b_min = Some(b);
        self
    }

    fn with_const(mut self, name: &str, v: f64) -> Self {
        self.constants.insert(name.to_string(), v);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub suite: String,
    pub trials: Vec<BoundTrial>,
    /// Suite-level facts that are not per-trial bounds.
    #[serde(default)]
    pub summary: BTreeMap<String, f64>,
}

impl BoundReport {
    pub fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, t: BoundTrial) {
        self.trials.push(t);
    }

    pub fn violations(&self) -> usize {
        self.trials.iter().filter(|t| t.violation).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0 && self.trials.iter().all(|t| t.measured.is_finite())
    }

    pub fn trials_for<'a>(&'a self, check: &'a str) -> impl Iterator<Item = &'a BoundTrial> + 'a {
        self.trials.iter().filter(move |t| t.check == check)
    }

    pub fn max_measured(&self, check: &str) -> f64 {
        self.trials_for(check).map(|t| t.measured).fold(0.0, f64::max)
    }

    /// Appends another report's trials, keeping this report's name.
    pub fn merge(&mut self, other: BoundReport) {
        self.trials.extend(other.trials);
        for (k, v) in other.summary {
            self.summary.insert(format!("{}.{k}", other.suite), v);
        }
    }
}

/// Belief from normalized exponentials of uniform logits, mixed with uniform
/// just enough to keep every entry at or above `b_min`.
pub fn random_belief<R: Rng>(n: usize, b_min: f64, rng: &mut R) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut b = softmax(&logits);
    let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
    let u = 1.0 / n as f64;
    if lo < b_min && b_min < u {
        let beta = (b_min - lo) / (u - lo);
        b.iter_mut().for_each(|v| *v = (1.0 - beta) * *v + beta * u);
    }
    b
}

/// Log-likelihood vector with every role's action probability in `[0.05, 1)`.
fn random_ell<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05f64..1.0).ln()).collect()
}

fn perturb<R: Rng>(x: &[f64], eps: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|v| if eps > 0.0 { v + rng.gen_range(-eps..=eps) } else { *v })
        .collect()
}

fn single_row_tape(start: &[f64], ells: &[Vec<f64>], stab: &Stabilization) -> Result<BeliefChainTape> {
    let b0 = BeliefMatrix::from_rows(&[0], &[start.to_vec()])?;
    let steps: Vec<Vec<Vec<f64>>> = ells.iter().map(|e| vec![e.clone()]).collect();
    unroll_chain(&b0, &steps, ells.len(), stab)
}

fn tape_min(tape: &BeliefChainTape) -> f64 {
    tape.beliefs
        .iter()
        .map(BeliefMatrix::min_entry)
        .fold(tape.start.min_entry(), f64::min)
}

/// Softmax is 2-Lipschitz from the sup norm to the L1 norm.
pub fn verify_lipschitz(trials: usize, z_range: std::ops::RangeInclusive<usize>, seed: u64) -> Result<BoundReport> {
    if z_range.is_empty() || *z_range.start() == 0 {
        return Err(DbosError::Config("role-count range must be non-empty and >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("lipschitz");
    let hand: f64 = softmax(&[1.0, 0.0]).iter().zip(softmax(&[0.0, 0.0])).map(|(a, b)| (a - b).abs()).sum();
    rep.push(BoundTrial::new("softmax_l1", hand, 2.0, 2));
    for i in 0..trials {
        let n = rng.gen_range(z_range.clone());
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        // mix large and small perturbations
        let scale = [1e-3, 0.1, 1.0, 5.0][i % 4];
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-scale..scale)).collect();
        let d: Vec<f64> = softmax(&x).iter().zip(softmax(&y)).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        rep.push(BoundTrial::new("softmax_l1", l1_norm(&d), 2.0 * linf_norm(&dx), n));
    }
    Ok(rep)
}

/// k-step belief error from per-step log-likelihood perturbations of size at
/// most `eps`, checked at every intermediate step.
pub fn verify_belief_error(k: usize, eps: f64, trials: usize, seed: u64) -> Result<BoundReport> {
    if k == 0 || !(eps >= 0.0) {
        return Err(DbosError::Config("belief error sweep needs k >= 1 and eps >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("belief_error");
    let stab = Stabilization::exact();
    for _ in 0..trials {
        let n = rng.gen_range(2..=6);
        let b0 = random_belief(n, 0.0, &mut rng);
        let ells: Vec<Vec<f64>> = (0..k).map(|_| random_ell(n, &mut rng)).collect();
        let hat: Vec<Vec<f64>> = ells.iter().map(|l| perturb(l, eps, &mut rng)).collect();
        let true_tape = single_row_tape(&b0, &ells, &stab)?;
        let hat_tape = single_row_tape(&b0, &hat, &stab)?;
        let mut eps_sum = 0.0;
        for m in 0..k {
            let e: Vec<f64> = ells[m].iter().zip(&hat[m]).map(|(a, b)| a - b).collect();
            eps_sum += linf_norm(&e);
            let d: Vec<f64> = true_tape.beliefs[m]
                .row(0)
                .iter()
                .zip(hat_tape.beliefs[m].row(0))
                .map(|(a, b)| a - b)
                .collect();
            let err = l1_norm(&d);
            rep.push(
                BoundTrial::new("belief_l1", err, 2.0 * eps_sum, n)
                    .with_k(m + 1)
                    .with_eps(eps)
                    .with_const("nominal_bound", 2.0 * (m + 1) as f64 * eps),
            );
            if m + 1 == k {
                rep.push(BoundTrial::new("belief_l1_uniform", err, 2.0 * k as f64 * eps, n).with_k(k).with_eps(eps));
            }
        }
    }
    Ok(rep)
}

/// Log conversion: `|log b' - log b|_inf <= |b' - b|_1 / b_min`, and the
/// log-belief drift `2 m eps / b_min` along perturbed chains.
pub fn verify_log_conversion(trials: usize, seed: u64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("log_conversion");
    let stab = Stabilization::exact();
    for _ in 0..trials {
        let n = rng.gen_range(2..=6);
        let floor = rng.gen_range(0.01..(0.5 / n as f64));
        let b = random_belief(n, floor, &mut rng);
        let bh = random_belief(n, floor, &mut rng);
        let b_min = b.iter().chain(&bh).copied().fold(f64::INFINITY, f64::min);
        let dlog: Vec<f64> = b.iter().zip(&bh).map(|(x, y)| x.ln() - y.ln()).collect();
        let d: Vec<f64> = b.iter().zip(&bh).map(|(x, y)| x - y).collect();
        rep.push(BoundTrial::new("log_conversion", linf_norm(&dlog), l1_norm(&d) / b_min, n).with_b_min(b_min));

        let k = rng.gen_range(1..=6);
        let eps = rng.gen_range(0.0..0.1);
        let b0 = random_belief(n, 0.05, &mut rng);
        let ells: Vec<Vec<f64>> = (0..k).map(|_| random_ell(n, &mut rng)).collect();
        let hat: Vec<Vec<f64>> = ells.iter().map(|l| perturb(l, eps, &mut rng)).collect();
        let t1 = single_row_tape(&b0, &ells, &stab)?;
        let t2 = single_row_tape(&b0, &hat, &stab)?;
        let b_min = tape_min(&t1).min(tape_min(&t2));
        for m in 0..k {
            let dl: Vec<f64> = t1.beliefs[m]
                .row(0)
                .iter()
                .zip(t2.beliefs[m].row(0))
                .map(|(x, y)| x.ln() - y.ln())
                .collect();
            rep.push(
                BoundTrial::new("log_drift", linf_norm(&dl), 2.0 * (m + 1) as f64 * eps / b_min, n)
                    .with_k(m + 1)
                    .with_eps(eps)
                    .with_b_min(b_min),
            );
        }
    }
    Ok(rep)
}

/// Column-sum operator norm.
fn norm_1to1(m: &Mat64) -> f64 {
    crate::belief::operator_norm_1to1(m)
}

/// Closed-form chain `D_end (I - 1 b_endᵀ) D_{s+1}^-1` for every `s`.
fn closed_chain(tape: &BeliefChainTape, s: usize) -> Result<Mat64> {
    chain_jacobian_closed(tape.endpoint().row(0), tape.beliefs[s].row(0))
}

/// Chain collapse, magnitude and perturbation bounds on random chains with
/// `k <= k_max` and `2 <= |Z| <= z_max`.
pub fn verify_chain_identities(k_max: usize, z_max: usize, trials: usize, seed: u64) -> Result<BoundReport> {
    if k_max == 0 || z_max < 2 {
        return Err(DbosError::Config("chain sweep needs k_max >= 1 and z_max >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("chain");
    let stab = Stabilization::exact();
    for _ in 0..trials {
        let n = rng.gen_range(2..=z_max);
        let k = rng.gen_range(1..=k_max);
        let eps = rng.gen_range(0.0..0.1);
        let b0 = random_belief(n, 0.02, &mut rng);
        let ells: Vec<Vec<f64>> = (0..k).map(|_| random_ell(n, &mut rng)).collect();
        let hat: Vec<Vec<f64>> = ells.iter().map(|l| perturb(l, eps, &mut rng)).collect();
        let tape = single_row_tape(&b0, &ells, &stab)?;
        let tape_hat = single_row_tape(&b0, &hat, &stab)?;
        let b_min = tape_min(&tape).min(tape_min(&tape_hat));

        // collapse: explicit product against the closed form; for the empty
        // product both sides are compared after the step's softmax Jacobian
        let mut diff: f64 = 0.0;
        for s in 0..k {
            let naive = chain_jacobian_naive(&tape, 0, s)?;
            let closed = closed_chain(&tape, s)?;
            let d = if s + 1 < k {
                naive.max_abs_diff(&closed)
            } else {
                let sj = softmax_jacobian(tape.beliefs[s].row(0));
                naive.matmul(&sj)?.max_abs_diff(&closed.matmul(&sj)?)
            };
            diff = diff.max(d);
        }
        rep.push(BoundTrial::new("collapse", diff, 1e-10, n).with_k(k).with_b_min(b_min));

        for s in 0..k {
            let pi = closed_chain(&tape, s)?;
            let pi_hat = closed_chain(&tape_hat, s)?;
            rep.push(
                BoundTrial::new("magnitude", norm_1to1(&pi), (n as f64 - 1.0) / b_min, n)
                    .with_k(k)
                    .with_b_min(b_min),
            );
            rep.push(
                BoundTrial::new("magnitude", norm_1to1(&pi_hat), (n as f64 - 1.0) / b_min, n)
                    .with_k(k)
                    .with_b_min(b_min),
            );
            let eps_meas = ells
                .iter()
                .zip(&hat)
                .map(|(a, b)| linf_norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()))
                .fold(0.0, f64::max);
            rep.push(
                BoundTrial::new(
                    "perturbation",
                    norm_1to1(&pi_hat.sub(&pi)?),
                    (6.0 * n as f64 - 4.0) * k as f64 * eps_meas / (b_min * b_min),
                    n,
                )
                .with_k(k)
                .with_eps(eps_meas)
                .with_b_min(b_min),
            );
        }
    }
    Ok(rep)
}

/// `C(Z) = 22 |Z| - 18`.
pub fn gradient_error_constant(n_roles: usize) -> f64 {
    22.0 * n_roles as f64 - 18.0
}

struct WindowGrad {
    grad: Vec<f64>,
    /// `grad_theta ell_s^z` per step and role.
    role_grads: Vec<Vec<Vec<f64>>>,
    ells: Vec<Vec<f64>>,
    b_min: f64,
}

/// `grad_theta (-w . b_k)` through a single observer's chain driven by the
/// policy's log-likelihoods at `obs`.
fn linear_critic_window_grad(
    arch: &PolicyArch,
    theta: &[f64],
    start: &[f64],
    obs: &[Vec<f64>],
    actions: &[usize],
    w: &[f64],
) -> Result<WindowGrad> {
    let nz = arch.n_belief_roles;
    let ells = obs
        .iter()
        .zip(actions)
        .map(|(o, &a)| arch.role_loglik_vector(theta, o, a))
        .collect::<Result<Vec<_>>>()?;
    let tape = single_row_tape(start, &ells, &Stabilization::exact())?;
    let neg: Vec<f64> = w.iter().map(|v| -v).collect();
    let d = tape.backward(&neg)?.d_ell;
    let mut grad = vec![0.0; theta.len()];
    let mut role_grads = Vec::with_capacity(obs.len());
    for (s, (o, &a)) in obs.iter().zip(actions).enumerate() {
        let mut per_role = Vec::with_capacity(nz);
        for z in 0..nz {
            let g = arch.grad_role_loglik(theta, o, a, z)?;
            crate::tensor::axpy(d[s][0][z], &g, &mut grad);
            per_role.push(g);
        }
        role_grads.push(per_role);
    }
    Ok(WindowGrad {
        grad,
        role_grads,
        ells,
        b_min: tape_min(&tape),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientBoundSweep {
    pub k_max: usize,
    pub deltas: [f64; 3],
    pub roles: [usize; 3],
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradientBoundSweep {
    fn default() -> Self {
        Self {
            k_max: 5,
            deltas: [0.01, 0.05, 0.1],
            roles: [2, 3, 5],
            trials: 40,
            seed: 7,
        }
    }
}

/// Gradient error of the shaping window under observation perturbations,
/// with a linear critic so the gradient-Lipschitz constant is zero.
///
/// Each trial draws one observation/action sequence of length `k_max` and
/// evaluates every `k <= k_max` on its prefix, so the per-`k` averages share
/// random numbers. The summary records the mean error per `k`.
pub fn verify_gradient_error_bound(sweep: &GradientBoundSweep) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sweep.seed);
    let mut rep = BoundReport::new("gradient_error");
    let obs_dim = 3;
    let mut sums = vec![0.0; sweep.k_max];
    let mut counts = vec![0usize; sweep.k_max];
    for &n in &sweep.roles {
        let arch = PolicyArch::new(obs_dim, 6, 1, 4, n, n)?;
        for &delta in &sweep.deltas {
            for _ in 0..sweep.trials {
                let theta = arch.init(&mut rng)?;
                let th = theta.as_slice();
                let start = random_belief(n, 0.05, &mut rng);
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let obs: Vec<Vec<f64>> = (0..sweep.k_max)
                    .map(|_| (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let obs_hat: Vec<Vec<f64>> = obs.iter().map(|o| perturb(o, delta, &mut rng)).collect();
                let actions: Vec<usize> = (0..sweep.k_max).map(|_| rng.gen_range(0..4)).collect();
                let l_v = linf_norm(&w);
                for k in 1..=sweep.k_max {
                    let tru = linear_critic_window_grad(&arch, th, &start, &obs[..k], &actions[..k], &w)?;
                    let apx = linear_critic_window_grad(&arch, th, &start, &obs_hat[..k], &actions[..k], &w)?;
                    let diff: Vec<f64> = apx.grad.iter().zip(&tru.grad).map(|(a, b)| a - b).collect();
                    let err = l2_norm(&diff);
                    let mut eps: f64 = 0.0;
                    let mut g_pi: f64 = 0.0;
                    let mut l_pi: f64 = 0.0;
                    let mut delta_meas: f64 = 0.0;
                    for s in 0..k {
                        let e: Vec<f64> = apx.ells[s].iter().zip(&tru.ells[s]).map(|(a, b)| a - b).collect();
                        eps = eps.max(linf_norm(&e));
                        let dobs: Vec<f64> = obs_hat[s].iter().zip(&obs[s]).map(|(a, b)| a - b).collect();
                        let dn = linf_norm(&dobs);
                        delta_meas = delta_meas.max(dn);
                        for z in 0..n {
                            g_pi = g_pi.max(l2_norm(&apx.role_grads[s][z]));
                            if dn > 0.0 {
                                let dg: Vec<f64> = apx.role_grads[s][z]
                                    .iter()
                                    .zip(&tru.role_grads[s][z])
                                    .map(|(a, b)| a - b)
                                    .collect();
                                l_pi = l_pi.max(l2_norm(&dg) / dn);
                            }
                        }
                    }
                    let b_min = tru.b_min.min(apx.b_min);
                    let bound = gradient_error_constant(n) * k as f64 * l_v / (b_min * b_min)
                        * (k as f64 * eps * g_pi + l_pi * delta_meas);
                    rep.push(
                        BoundTrial::new("gradient_error", err, bound, n)
                            .with_k(k)
                            .with_eps(eps)
                            .with_b_min(b_min)
                            .with_const("delta", delta_meas)
                            .with_const("l_v", l_v)
                            .with_const("l_g", 0.0)
                            .with_const("g_pi", g_pi)
                            .with_const("l_pi", l_pi),
                    );
                    sums[k - 1] += err;
                    counts[k - 1] += 1;
                }
            }
        }
    }
    for (k, (s, c)) in sums.iter().zip(&counts).enumerate() {
        rep.summary.insert(format!("mean_error_k{}", k + 1), s / (*c).max(1) as f64);
    }
    let monotone = sums
        .windows(2)
        .zip(counts.windows(2))
        .all(|(s, c)| s[1] / c[1].max(1) as f64 >= s[0] / c[0].max(1) as f64);
    rep.summary.insert("mean_error_monotone_in_k".into(), if monotone { 1.0 } else { 0.0 });
    Ok(rep)
}

/// Mixture response `sum_z b_k^z pi_opp(a | z)` of a belief-conditioned
/// opponent, differentiated through the belief chain and checked against
/// central differences. Heads outside the role hypothesis set do not touch
/// the beliefs, so perturbing them must leave the mixture unchanged.
pub fn verify_sufficient_statistic(trials: usize, seed: u64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("sufficient_statistic");
    for _ in 0..trials {
        let n = rng.gen_range(2..=4);
        let k = rng.gen_range(1..=3);
        let arch = PolicyArch::new(3, 5, 1, 3, n + 1, n)?;
        let theta = arch.init(&mut rng)?;
        let start = random_belief(n, 0.05, &mut rng);
        let obs: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let actions: Vec<usize> = (0..k).map(|_| rng.gen_range(0..3)).collect();
        let response = random_belief(n, 0.0, &mut rng);
        let mixture = |th: &[f64]| -> f64 {
            let ells: Vec<Vec<f64>> = obs
                .iter()
                .zip(&actions)
                .map(|(o, &a)| arch.role_loglik_vector(th, o, a).expect("valid shapes"))
                .collect();
            let tape = single_row_tape(&start, &ells, &Stabilization::exact()).expect("valid chain");
            tape.endpoint().row(0).iter().zip(&response).map(|(b, p)| b * p).sum()
        };
        // analytic: the linear-critic window gradient with w = -response
        let neg: Vec<f64> = response.iter().map(|v| -v).collect();
        let analytic = linear_critic_window_grad(&arch, theta.as_slice(), &start, &obs, &actions, &neg)?.grad;
        let fd = finite_diff_grad(mixture, theta.as_slice(), 1e-6)?;
        rep.push(
            BoundTrial::new("chain_rule_vs_fd", max_rel_error(&analytic, &fd, 1e-4), 1e-4, n).with_k(k),
        );

        let base = mixture(theta.as_slice());
        let mut moved: f64 = 0.0;
        let mut grad_there: f64 = 0.0;
        for name in [format!("head.pi.{n}.w"), format!("head.pi.{n}.b"), "head.v.w".into(), "head.v.b".into()] {
            let r = theta.range(&name)?;
            let mut p = theta.as_slice().to_vec();
            for v in &mut p[r.clone()] {
                *v += rng.gen_range(-1.0..1.0);
            }
            moved = moved.max((mixture(&p) - base).abs());
            grad_there = grad_there.max(linf_norm(&analytic[r]));
        }
        rep.push(BoundTrial::new("non_belief_heads_inert", moved, 0.0, n).with_k(k));
        rep.push(BoundTrial::new("non_belief_heads_zero_grad", grad_there, 0.0, n).with_k(k));
    }
    Ok(rep)
}

/// Every suite at its default trial count, keyed by name.
pub fn suite_names() -> &'static [&'static str] {
    &[
        "lipschitz",
        "belief_error",
        "log_conversion",
        "chain",
        "gradient_error",
        "sufficient_statistic",
    ]
}

pub fn run_suite(name: &str, seed: u64) -> Result<BoundReport> {
    match name {
        "lipschitz" => verify_lipschitz(10_000, 2..=10, seed),
        "belief_error" => {
            let mut rep = BoundReport::new("belief_error");
            for k in 1..=8 {
                for (i, eps) in [1e-3, 1e-2, 1e-1].into_iter().enumerate() {
                    let sub = verify_belief_error(k, eps, 1000, seed.wrapping_add((k * 10 + i) as u64))?;
                    rep.trials.extend(sub.trials);
                }
            }
            Ok(rep)
        }
        "log_conversion" => verify_log_conversion(1000, seed),
        "chain" => verify_chain_identities(8, 6, 1000, seed),
        "gradient_error" => verify_gradient_error_bound(&GradientBoundSweep {
            seed,
            ..Default::default()
        }),
        "sufficient_statistic" => verify_sufficient_statistic(100, seed),
        "all" => {
            let mut rep = BoundReport::new("all");
            for s in suite_names() {
                rep.merge(run_suite(s, seed)?);
            }
            Ok(rep)
        }
        other => Err(DbosError::Config(format!("unknown bound suite `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_softmax_pair() {
        let d: f64 = softmax(&[1.0, 0.0]).iter().zip(softmax(&[0.0, 0.0])).map(|(a, b)| (a - b).abs()).sum();
        // 2 * (e/(1+e) - 1/2)
        let expect = 2.0 * (1.0f64.exp() / (1.0 + 1.0f64.exp()) - 0.5);
        assert!((d - expect).abs() < 1e-15);
        assert!((d - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn violation_flag_uses_slack() {
        assert!(!BoundTrial::new("x", 1.0 + 0.5e-9, 1.0, 2).violation);
        assert!(BoundTrial::new("x", 1.0 + 2e-9, 1.0, 2).violation);
        assert!(BoundTrial::new("x", f64::NAN, 1.0, 2).violation);
    }

    #[test]
    fn constant_values() {
        assert_eq!(gradient_error_constant(2), 26.0);
        assert_eq!(gradient_error_constant(5), 92.0);
    }

    #[test]
    fn zero_perturbation_is_exact() {
        let rep = verify_belief_error(4, 0.0, 20, 1).unwrap();
        assert!(rep.trials.iter().all(|t| t.measured == 0.0));
        let sweep = GradientBoundSweep {
            deltas: [0.0; 3],
            trials: 3,
            ..Default::default()
        };
        let rep = verify_gradient_error_bound(&sweep).unwrap();
        assert!(rep.trials.iter().all(|t| t.measured == 0.0 && !t.violation));
    }

    #[test]
    fn three_step_bound_value() {
        let rep = verify_belief_error(3, 0.01, 50, 2).unwrap();
        for t in rep.trials_for("belief_l1_uniform") {
            assert!((t.bound - 0.06).abs() < 1e-15);
            assert!(!t.violation);
        }
    }

    #[test]
    fn random_belief_respects_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let b = random_belief(5, 0.1, &mut rng);
            assert!(b.iter().all(|v| *v >= 0.1 - 1e-12));
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
