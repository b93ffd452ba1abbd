//! Belief-shaping gradient: how the shaper's parameters move observer beliefs
//! `k` steps ahead, scored by a belief-conditioned critic.
//!
//! For every window `(env, t)` the stored start belief `B_t` is held fixed and
//! `B_{t+k}(theta)` is rebuilt from the log-likelihoods of the shaper's actions
//! at `t .. t+k-1`. The shaping loss is `-lambda * mean_windows V(o_{t+k}, B_{t+k})`.

use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::belief::{
    chain_jacobian_closed, entropy, softmax_jacobian, unroll_chain, BeliefChainTape, Stabilization,
};
use crate::buffer::RolloutBuffer;
use crate::critic::{CriticArch, CriticSample};
use crate::error::{DbosError, Result};
use crate::policy::{PolicyArch, PolicyForward};
use crate::tensor::{l2_norm, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapingMode {
    /// Exact gradient of the averaged window loss.
    Direct,
    /// Detached per-step coefficients, gated, normalized and clipped.
    Coefficient,
}

impl ShapingMode {
    pub fn name(&self) -> &'static str {
        match self {
            ShapingMode::Direct => "direct",
            ShapingMode::Coefficient => "coefficient",
        }
    }
}

impl FromStr for ShapingMode {
    type Err = DbosError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(ShapingMode::Direct),
            "coefficient" => Ok(ShapingMode::Coefficient),
            other => Err(DbosError::Config(format!("unknown shaping mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub k: usize,
    pub lambda: f64,
    pub mode: ShapingMode,
    /// Skip an observer's coefficients in a window when its endpoint belief
    /// entropy (nats) is below this.
    pub gate_entropy: Option<f64>,
    /// Rescale active coefficients to this root-mean-square.
    pub rms_target: Option<f64>,
    pub coef_clip: Option<f64>,
    /// Norm cap on the final shaping gradient.
    pub grad_cap: Option<f64>,
    pub role0_restrict: bool,
    pub stab: Stabilization,
}

impl ShapingConfig {
    pub fn new(k: usize, lambda: f64) -> Result<Self> {
        let cfg = Self {
            k,
            lambda,
            mode: ShapingMode::Coefficient,
            gate_entropy: Some(0.05),
            rms_target: Some(1.0),
            coef_clip: Some(5.0),
            grad_cap: Some(0.5),
            role0_restrict: false,
            stab: Stabilization::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// No gating, normalization, clipping or cap.
    pub fn raw(mut self) -> Self {
        self.gate_entropy = None;
        self.rms_target = None;
        self.coef_clip = None;
        self.grad_cap = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DbosError::Config("shaping horizon k must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(DbosError::Config(format!("shaping weight must be >= 0, got {}", self.lambda)));
        }
        for (name, v) in [
            ("rms target", self.rms_target),
            ("coefficient clip", self.coef_clip),
            ("gradient cap", self.grad_cap),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(DbosError::Config(format!("{name} must be positive")));
                }
            }
        }
        self.stab.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapingDiagnostics {
    pub windows: usize,
    pub mean_critic_value: f64,
    pub mean_endpoint_entropy: f64,
    /// Share of (window, observer) rows removed by the entropy gate.
    pub gated_fraction: f64,
    pub coef_rms_raw: f64,
    pub coef_scale: f64,
    pub clipped_fraction: f64,
    pub pre_cap_norm: f64,
    pub post_cap_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapingGrad {
    pub grad: Vec<f64>,
    pub diagnostics: ShapingDiagnostics,
}

/// Shared inputs for every shaping computation on one rollout.
#[derive(Clone, Copy)]
pub struct ShapingContext<'a> {
    pub policy: &'a PolicyArch,
    pub critic: &'a CriticArch,
    pub phi: &'a [f64],
    pub buffer: &'a RolloutBuffer,
}

/// Policy forwards for one step, shared between observers whose proxies coincide.
struct StepForwards {
    fwds: Vec<PolicyForward>,
    /// Index into `fwds` for each observer.
    owner: Vec<usize>,
    ells: Vec<Vec<f64>>,
}

fn step_forwards(policy: &PolicyArch, theta: &[f64], proxies: &[Vec<f64>], action: usize) -> Result<StepForwards> {
    let mut fwds: Vec<PolicyForward> = Vec::new();
    let mut firsts: Vec<usize> = Vec::new();
    let mut owner = Vec::with_capacity(proxies.len());
    for (j, p) in proxies.iter().enumerate() {
        match firsts.iter().position(|&f| proxies[f] == *p) {
            Some(i) => owner.push(i),
            None => {
                owner.push(fwds.len());
                firsts.push(j);
                fwds.push(policy.forward(theta, p)?);
            }
        }
    }
    let ells = owner.iter().map(|&i| policy.loglik_from_forward(&fwds[i], action)).collect();
    Ok(StepForwards { fwds, owner, ells })
}

impl ShapingContext<'_> {
    fn ells_at(&self, theta: &[f64], e: usize, s: usize) -> Result<Vec<Vec<f64>>> {
        let step = &self.buffer.envs[e].steps[s];
        step.proxies
            .iter()
            .map(|p| self.policy.role_loglik_vector(theta, p, step.actions[step.shaper]))
            .collect()
    }

    fn window_tape(&self, e: usize, t: usize, ells: Vec<Vec<Vec<f64>>>, cfg: &ShapingConfig) -> Result<BeliefChainTape> {
        unroll_chain(&self.buffer.envs[e].steps[t].beliefs, &ells, cfg.k, &cfg.stab)
    }

    fn endpoint_obs(&self, e: usize, t: usize, k: usize) -> &[f64] {
        let end = &self.buffer.envs[e].steps[t + k];
        &end.obs[end.shaper]
    }

    /// `-V(o_{t+k}, B_{t+k}(theta))` for one window, recomputed from `theta`.
    pub fn window_shaping_loss(&self, theta: &[f64], e: usize, t: usize, cfg: &ShapingConfig) -> Result<f64> {
        let ells = (t..t + cfg.k)
            .map(|s| self.ells_at(theta, e, s))
            .collect::<Result<Vec<_>>>()?;
        let tape = self.window_tape(e, t, ells, cfg)?;
        Ok(-self.critic.critic_value(self.phi, self.endpoint_obs(e, t, cfg.k), tape.endpoint())?)
    }

    /// `lambda` times the mean window loss over every valid window.
    pub fn mean_shaping_loss(&self, theta: &[f64], cfg: &ShapingConfig) -> Result<f64> {
        let windows = self.buffer.valid_windows(cfg.k);
        if windows.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &(e, t) in &windows {
            total += self.window_shaping_loss(theta, e, t, cfg)?;
        }
        Ok(cfg.lambda * total / windows.len() as f64)
    }

    /// Shaping gradient with respect to the policy parameters.
    pub fn compute_gbos(&self, theta: &ParamVector, cfg: &ShapingConfig) -> Result<ShapingGrad> {
        cfg.validate()?;
        let th = theta.as_slice();
        let k = cfg.k;
        let nz = self.policy.n_belief_roles;
        let windows = self.buffer.valid_windows(k);
        let mut diag = ShapingDiagnostics {
            windows: windows.len(),
            coef_scale: 1.0,
            ..Default::default()
        };
        let mut grad = vec![0.0; th.len()];
        if windows.is_empty() || cfg.lambda == 0.0 {
            return Ok(ShapingGrad { grad, diagnostics: diag });
        }

        // Forwards for every step some window touches.
        let mut needed = vec![vec![false; self.buffer.horizon()]; self.buffer.n_envs()];
        for &(e, t) in &windows {
            needed[e][t..t + k].iter_mut().for_each(|v| *v = true);
        }
        let mut fwd: Vec<Vec<Option<StepForwards>>> = Vec::with_capacity(needed.len());
        for (e, row) in needed.iter().enumerate() {
            let mut out = Vec::with_capacity(row.len());
            for (s, &need) in row.iter().enumerate() {
                out.push(if need {
                    let step = &self.buffer.envs[e].steps[s];
                    Some(step_forwards(self.policy, th, &step.proxies, step.actions[step.shaper])?)
                } else {
                    None
                });
            }
            fwd.push(out);
        }

        // Per-window coefficients of the negated critic value.
        let mut coefs = Vec::with_capacity(windows.len());
        let mut active_rows = Vec::with_capacity(windows.len());
        let mut gated = 0usize;
        let mut ent_sum = 0.0;
        let mut val_sum = 0.0;
        for &(e, t) in &windows {
            let ells = (t..t + k)
                .map(|s| fwd[e][s].as_ref().map(|f| f.ells.clone()).expect("forward computed"))
                .collect();
            let tape = self.window_tape(e, t, ells, cfg)?;
            let o_end = self.endpoint_obs(e, t, k);
            val_sum += self.critic.critic_value(self.phi, o_end, tape.endpoint())?;
            let dv = self.critic.grad_wrt_belief_flat(self.phi, o_end, tape.endpoint().as_flat())?;
            let neg: Vec<f64> = dv.iter().map(|v| -v).collect();
            let c = match cfg.mode {
                ShapingMode::Direct => tape.backward(&neg)?.d_ell,
                ShapingMode::Coefficient => compute_coefficients(&tape, &neg)?,
            };
            let end = tape.endpoint();
            let mut rows = vec![true; end.n_observers()];
            for (j, row) in rows.iter_mut().enumerate() {
                let h = entropy(end.row(j));
                ent_sum += h;
                if cfg.mode == ShapingMode::Coefficient {
                    if let Some(th) = cfg.gate_entropy {
                        if h < th {
                            *row = false;
                            gated += 1;
                        }
                    }
                }
            }
            coefs.push(c);
            active_rows.push(rows);
        }
        let n_rows: usize = active_rows.iter().map(Vec::len).sum();
        diag.mean_endpoint_entropy = ent_sum / n_rows.max(1) as f64;
        diag.gated_fraction = gated as f64 / n_rows.max(1) as f64;
        diag.mean_critic_value = val_sum / windows.len() as f64;

        let w_scale = cfg.lambda / windows.len() as f64;
        let per_entry = match cfg.mode {
            ShapingMode::Direct => w_scale,
            ShapingMode::Coefficient => {
                let m = coefs[0].first().map_or(0, Vec::len);
                let role_mask = |z: usize| !cfg.role0_restrict || z == 0;
                // gate and role mask
                let mut sq = 0.0;
                let mut count = 0usize;
                for (c, rows) in coefs.iter_mut().zip(&active_rows) {
                    for step in c.iter_mut() {
                        for (j, row) in step.iter_mut().enumerate() {
                            for (z, v) in row.iter_mut().enumerate() {
                                if !rows[j] || !role_mask(z) {
                                    *v = 0.0;
                                } else {
                                    sq += *v * *v;
                                    count += 1;
                                }
                            }
                        }
                    }
                }
                let rms = if count > 0 { (sq / count as f64).sqrt() } else { 0.0 };
                diag.coef_rms_raw = rms;
                let scale = match cfg.rms_target {
                    Some(target) if rms > 0.0 => target / rms,
                    _ => 1.0,
                };
                diag.coef_scale = scale;
                let mut clipped = 0usize;
                for c in coefs.iter_mut() {
                    for v in c.iter_mut().flatten().flatten() {
                        *v *= scale;
                        if let Some(cl) = cfg.coef_clip {
                            if v.abs() > cl {
                                *v = v.signum() * cl;
                                clipped += 1;
                            }
                        }
                    }
                }
                diag.clipped_fraction = clipped as f64 / count.max(1) as f64;
                w_scale / (k * m.max(1) * nz) as f64
            }
        };

        // Accumulate log-likelihood weights per step, then one backward per forward.
        let mut weights: Vec<Vec<Option<Vec<Vec<f64>>>>> = needed
            .iter()
            .map(|row| row.iter().map(|_| None).collect())
            .collect();
        for (&(e, t), c) in windows.iter().zip(&coefs) {
            for (s_off, step_c) in c.iter().enumerate() {
                let slot = weights[e][t + s_off].get_or_insert_with(|| vec![vec![0.0; nz]; step_c.len()]);
                for (wj, cj) in slot.iter_mut().zip(step_c) {
                    for (w, v) in wj.iter_mut().zip(cj) {
                        *w += per_entry * v;
                    }
                }
            }
        }
        for (e, row) in weights.iter().enumerate() {
            for (s, w) in row.iter().enumerate() {
                let Some(w) = w else { continue };
                let f = fwd[e][s].as_ref().expect("forward computed");
                let step = &self.buffer.envs[e].steps[s];
                let action = step.actions[step.shaper];
                for (i, fw) in f.fwds.iter().enumerate() {
                    let mut combined = vec![0.0; nz];
                    for (j, wj) in w.iter().enumerate() {
                        if f.owner[j] == i {
                            combined.iter_mut().zip(wj).for_each(|(a, b)| *a += b);
                        }
                    }
                    self.policy.accumulate_loglik_grad(th, fw, action, &combined, &mut grad)?;
                }
            }
        }

        if cfg.role0_restrict {
            grad = self.policy.restrict_to_role0(theta, &grad)?;
        }
        diag.pre_cap_norm = l2_norm(&grad);
        if let Some(cap) = cfg.grad_cap {
            crate::tensor::clip_by_norm(&mut grad, cap);
        }
        diag.post_cap_norm = l2_norm(&grad);
        Ok(ShapingGrad { grad, diagnostics: diag })
    }
}

/// Per-step coefficients `c[s][j][z] = d(upstream . B_end) / d ell_s^{j,z}`
/// with the observer beliefs held at their tape values.
///
/// Without the floor mix this uses the closed-form chain Jacobian
/// `(diag(b_end) - b_end b_endᵀ) diag(b_{s+1})^-1` times the step's softmax
/// Jacobian; with the floor it falls back to the exact reverse pass.
pub fn compute_coefficients(tape: &BeliefChainTape, upstream: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    if tape.stab.alpha_floor != 0.0 {
        return Ok(tape.backward(upstream)?.d_ell);
    }
    let nz = tape.start.n_roles();
    let m = tape.start.n_observers();
    crate::error::check_len("compute_coefficients upstream", m * nz, upstream.len())?;
    let end = tape.endpoint();
    let tau = tape.stab.temperature;
    let mut out = vec![vec![vec![0.0; nz]; m]; tape.k()];
    for (s, step) in out.iter_mut().enumerate() {
        for (j, row) in step.iter_mut().enumerate() {
            let after = tape.beliefs[s].row(j);
            let pi = chain_jacobian_closed(end.row(j), after)?;
            let g = &upstream[j * nz..(j + 1) * nz];
            let gp = pi.left_mul(g)?;
            let c = softmax_jacobian(after).left_mul(&gp)?;
            for (r, v) in row.iter_mut().zip(c) {
                *r = v / tau;
            }
        }
    }
    Ok(out)
}

/// Critic regression data: one sample per valid window, pairing the
/// endpoint observation and beliefs with the shaper's return from there.
pub fn critic_samples(buffer: &RolloutBuffer, k: usize, returns: &[Vec<f64>]) -> Result<Vec<CriticSample>> {
    let mut out = Vec::new();
    for (e, t) in buffer.valid_windows(k) {
        let end = &buffer.envs[e].steps[t + k];
        let target = *returns
            .get(e)
            .and_then(|r| r.get(t + k))
            .ok_or_else(|| DbosError::Data(format!("missing return for env {e} step {}", t + k)))?;
        out.push(CriticSample {
            obs: end.obs[end.shaper].clone(),
            beliefs: end.beliefs.as_flat().to_vec(),
            target,
        });
    }
    Ok(out)
}

/// Adds the shaping gradient to a (clipped) PPO minibatch gradient, spreading
/// it evenly over `updates_per_rollout` optimizer steps.
pub fn inject_correction(ppo_grad: &mut [f64], g_bos: &[f64], updates_per_rollout: usize) -> Result<f64> {
    crate::error::check_len("inject_correction", ppo_grad.len(), g_bos.len())?;
    if updates_per_rollout == 0 {
        return Err(DbosError::Config("updates per rollout must be >= 1".into()));
    }
    let s = 1.0 / updates_per_rollout as f64;
    for (p, g) in ppo_grad.iter_mut().zip(g_bos) {
        *p += s * g;
    }
    Ok(s * l2_norm(g_bos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::BeliefMatrix;

    #[test]
    fn config_validation() {
        assert!(ShapingConfig::new(0, 1.0).is_err());
        assert!(ShapingConfig::new(1, -1.0).is_err());
        assert!(ShapingConfig::new(3, 0.5).is_ok());
        assert_eq!("direct".parse::<ShapingMode>().unwrap(), ShapingMode::Direct);
        assert!("x".parse::<ShapingMode>().is_err());
    }

    #[test]
    fn closed_form_coefficients_match_reverse_pass() {
        let start = BeliefMatrix::from_rows(&[1, 2], &[vec![0.2, 0.5, 0.3], vec![0.6, 0.3, 0.1]]).unwrap();
        let ells = vec![
            vec![vec![-0.3, -1.2, -2.0], vec![-1.0, -0.1, -0.7]],
            vec![vec![-2.5, -0.4, -0.9], vec![-0.2, -0.2, -3.0]],
            vec![vec![-0.6, -0.6, -0.1], vec![-1.4, -0.8, -0.3]],
        ];
        let stab = Stabilization::new(1.7, 0.0).unwrap();
        let tape = unroll_chain(&start, &ells, 3, &stab).unwrap();
        let up = [0.4, -1.0, 0.3, 2.0, 0.1, -0.5];
        let a = compute_coefficients(&tape, &up).unwrap();
        let b = tape.backward(&up).unwrap().d_ell;
        for (x, y) in a.iter().flatten().flatten().zip(b.iter().flatten().flatten()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn injection_divides_by_update_count() {
        let mut g = vec![1.0, 0.0];
        let n = inject_correction(&mut g, &[0.0, 4.0], 4).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
        assert_eq!(n, 1.0);
        assert!(inject_correction(&mut g, &[0.0], 1).is_err());
        assert!(inject_correction(&mut g, &[0.0, 0.0], 0).is_err());
    }
}
