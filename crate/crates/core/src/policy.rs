//! Role-conditioned stochastic policy `pi_theta(a | o, z)`.
//!
//! A tanh trunk feeds one linear action head and one value output per role.
//! All heads live in the trunk's output layer, so a single forward pass
//! yields the logits for every role hypothesis at once.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::belief::{log_softmax, softmax, LOG_PROB_FLOOR};
use crate::error::{check_len, DbosError, Result};
use crate::tensor::{mlp_backward_into, mlp_forward_cached, MlpCache, MlpSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub obs_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub n_actions: usize,
    /// Roles with their own heads. Every agent acts through one of these.
    pub n_roles: usize,
    /// Leading roles that form the hypothesis set observers reason over.
    pub n_belief_roles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub action: usize,
    pub logp: f64,
    pub role: usize,
}

/// Cached forward pass for one observation.
#[derive(Debug, Clone)]
pub struct PolicyForward {
    cache: MlpCache,
    n_actions: usize,
    n_roles: usize,
}

impl PolicyForward {
    pub fn logits(&self, z: usize) -> &[f64] {
        &self.cache.output()[z * self.n_actions..(z + 1) * self.n_actions]
    }

    pub fn probs(&self, z: usize) -> Vec<f64> {
        softmax(self.logits(z))
    }

    pub fn log_probs(&self, z: usize) -> Vec<f64> {
        log_softmax(self.logits(z))
    }

    pub fn value(&self, z: usize) -> f64 {
        self.cache.output()[self.n_roles * self.n_actions + z]
    }

    pub fn cache(&self) -> &MlpCache {
        &self.cache
    }
}

impl PolicyArch {
    pub fn new(
        obs_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        n_actions: usize,
        n_roles: usize,
        n_belief_roles: usize,
    ) -> Result<Self> {
        if n_actions < 2 || n_roles == 0 || n_belief_roles == 0 || n_belief_roles > n_roles {
            return Err(DbosError::Config(format!(
                "invalid policy shape: actions={n_actions} roles={n_roles} belief_roles={n_belief_roles}"
            )));
        }
        let arch = Self {
            obs_dim,
            hidden,
            hidden_layers,
            n_actions,
            n_roles,
            n_belief_roles,
        };
        arch.spec().validate()?;
        Ok(arch)
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            input: self.obs_dim,
            hidden: self.hidden,
            output: self.n_roles * self.n_actions + self.n_roles,
            hidden_layers: self.hidden_layers,
            activation: crate::tensor::Activation::Tanh,
        }
    }

    /// Zero parameter vector with the named layout.
    pub fn zeros(&self) -> Result<ParamVector> {
        let spec = self.spec();
        let mut pv = ParamVector::new();
        spec.register_hidden(&mut pv, "trunk.")?;
        let fan_in = if self.hidden_layers == 0 { self.obs_dim } else { self.hidden };
        for z in 0..self.n_roles {
            pv.register(format!("head.pi.{z}.w"), &[self.n_actions, fan_in])?;
        }
        pv.register("head.v.w", &[self.n_roles, fan_in])?;
        for z in 0..self.n_roles {
            pv.register(format!("head.pi.{z}.b"), &[self.n_actions])?;
        }
        pv.register("head.v.b", &[self.n_roles])?;
        debug_assert_eq!(pv.len(), spec.param_count());
        Ok(pv)
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamVector> {
        let mut pv = self.zeros()?;
        self.spec().init_uniform(pv.as_mut_slice(), rng)?;
        Ok(pv)
    }

    fn check_role(&self, z: usize) -> Result<()> {
        if z >= self.n_roles {
            return Err(DbosError::RoleOutOfRange {
                role: z,
                n_roles: self.n_roles,
            });
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(DbosError::ActionOutOfRange {
                action: a,
                n_actions: self.n_actions,
            });
        }
        Ok(())
    }

    pub fn forward(&self, theta: &[f64], o: &[f64]) -> Result<PolicyForward> {
        Ok(PolicyForward {
            cache: mlp_forward_cached(theta, &self.spec(), o)?,
            n_actions: self.n_actions,
            n_roles: self.n_roles,
        })
    }

    pub fn action_distribution(&self, theta: &[f64], o: &[f64], z: usize) -> Result<Vec<f64>> {
        self.check_role(z)?;
        Ok(self.forward(theta, o)?.probs(z))
    }

    /// `ell^z = max(log pi(a | o, z), floor)` for every belief role `z`.
    pub fn role_loglik_vector(&self, theta: &[f64], o: &[f64], a: usize) -> Result<Vec<f64>> {
        self.check_action(a)?;
        let fwd = self.forward(theta, o)?;
        Ok(self.loglik_from_forward(&fwd, a))
    }

    pub fn loglik_from_forward(&self, fwd: &PolicyForward, a: usize) -> Vec<f64> {
        (0..self.n_belief_roles)
            .map(|z| fwd.log_probs(z)[a].max(LOG_PROB_FLOOR))
            .collect()
    }

    /// Accumulates `sum_z weights[z] * d ell^z / d theta` into `grad`.
    ///
    /// Entries whose log-probability sits at the floor are constant in theta
    /// and contribute nothing.
    pub fn accumulate_loglik_grad(
        &self,
        theta: &[f64],
        fwd: &PolicyForward,
        a: usize,
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        check_len("loglik weights", self.n_belief_roles, weights.len())?;
        let spec = self.spec();
        let mut upstream = vec![0.0; spec.output];
        let mut any = false;
        for (z, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let lp = fwd.log_probs(z);
            if lp[a] < LOG_PROB_FLOOR {
                continue;
            }
            let p = fwd.probs(z);
            for (i, pi) in p.iter().enumerate() {
                let onehot = if i == a { 1.0 } else { 0.0 };
                upstream[z * self.n_actions + i] += w * (onehot - pi);
            }
            any = true;
        }
        if any {
            mlp_backward_into(theta, &spec, fwd.cache(), &upstream, grad)?;
        }
        Ok(())
    }

    /// Analytic `grad_theta log pi(a | o, z)`.
    pub fn grad_role_loglik(&self, theta: &[f64], o: &[f64], a: usize, z: usize) -> Result<Vec<f64>> {
        self.check_role(z)?;
        self.check_action(a)?;
        let fwd = self.forward(theta, o)?;
        let mut grad = vec![0.0; theta.len()];
        let lp = fwd.log_probs(z);
        if lp[a] >= LOG_PROB_FLOOR {
            let mut upstream = vec![0.0; self.spec().output];
            for (i, pi) in fwd.probs(z).iter().enumerate() {
                upstream[z * self.n_actions + i] = if i == a { 1.0 } else { 0.0 } - pi;
            }
            mlp_backward_into(theta, &self.spec(), fwd.cache(), &upstream, &mut grad)?;
        }
        Ok(grad)
    }

    /// Backward pass of an arbitrary upstream over the raw output vector
    /// (all role logits followed by all role values).
    pub fn backward(
        &self,
        theta: &[f64],
        fwd: &PolicyForward,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        mlp_backward_into(theta, &self.spec(), fwd.cache(), upstream, grad)?;
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.spec().output
    }

    /// Parameter ranges of the action head for role `z` (weights, bias).
    pub fn head_ranges(&self, layout: &ParamVector, z: usize) -> Result<[Range<usize>; 2]> {
        Ok([
            layout.range(&format!("head.pi.{z}.w"))?,
            layout.range(&format!("head.pi.{z}.b"))?,
        ])
    }

    /// Keeps the trunk and the role-0 action head, zeroing every other head
    /// (other roles' action heads and all value outputs).
    pub fn restrict_to_role0(&self, layout: &ParamVector, grad: &[f64]) -> Result<Vec<f64>> {
        check_len("restrict_to_role0", layout.len(), grad.len())?;
        let mut out = grad.to_vec();
        for e in layout.registry() {
            let keep = e.name.starts_with("trunk.") || e.name == "head.pi.0.w" || e.name == "head.pi.0.b";
            if !keep {
                out[e.range()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(out)
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> PolicyArch {
        PolicyArch::new(4, 6, 2, 3, 3, 2).unwrap()
    }

    fn zero_heads(a: &PolicyArch, p: &mut ParamVector) {
        for z in 0..a.n_roles {
            p.get_mut(&format!("head.pi.{z}.w")).unwrap().fill(0.0);
            p.get_mut(&format!("head.pi.{z}.b")).unwrap().fill(0.0);
        }
    }

    #[test]
    fn layout_matches_spec() {
        let a = arch();
        let p = a.zeros().unwrap();
        assert_eq!(p.len(), a.spec().param_count());
        assert_eq!(p.registry().last().unwrap().name, "head.v.b");
    }

    #[test]
    fn zero_heads_give_uniform() {
        let a = arch();
        let mut p = a.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        zero_heads(&a, &mut p);
        let d = a.action_distribution(p.as_slice(), &[0.1, 0.2, 0.3, 0.4], 1).unwrap();
        assert!(d.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identical_heads_give_identical_distributions() {
        let a = arch();
        let mut p = a.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let w0 = p.get("head.pi.0.w").unwrap().to_vec();
        let b0 = p.get("head.pi.0.b").unwrap().to_vec();
        p.get_mut("head.pi.1.w").unwrap().copy_from_slice(&w0);
        p.get_mut("head.pi.1.b").unwrap().copy_from_slice(&b0);
        let o = [0.5, -0.5, 1.0, 0.0];
        assert_eq!(
            a.action_distribution(p.as_slice(), &o, 0).unwrap(),
            a.action_distribution(p.as_slice(), &o, 1).unwrap()
        );
        let l = a.role_loglik_vector(p.as_slice(), &o, 2).unwrap();
        assert_eq!(l[0], l[1]);
        assert!(l.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn role_errors() {
        let a = arch();
        let p = a.zeros().unwrap();
        assert!(matches!(
            a.action_distribution(p.as_slice(), &[0.0; 4], 3),
            Err(DbosError::RoleOutOfRange { .. })
        ));
        assert!(a.role_loglik_vector(p.as_slice(), &[0.0; 4], 3).is_err());
    }

    #[test]
    fn hand_built_logits() {
        // linear heads on a constant input: logits are the biases
        let a = PolicyArch::new(1, 1, 0, 2, 2, 2).unwrap();
        let mut p = a.zeros().unwrap();
        p.get_mut("head.pi.0.b").unwrap().copy_from_slice(&[0.8f64.ln(), 0.2f64.ln()]);
        p.get_mut("head.pi.1.b").unwrap().copy_from_slice(&[0.2f64.ln(), 0.8f64.ln()]);
        let l = a.role_loglik_vector(p.as_slice(), &[0.0], 0).unwrap();
        assert!((l[0] - (-0.2231435513142097)).abs() < 1e-12);
        assert!((l[1] - (-1.6094379124341003)).abs() < 1e-12);
    }

    #[test]
    fn loglik_gradient_matches_finite_differences() {
        let a = arch();
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = a.init(&mut rng).unwrap();
            let o: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let act = rng.gen_range(0..3);
            let z = rng.gen_range(0..3);
            let g = a.grad_role_loglik(p.as_slice(), &o, act, z).unwrap();
            let fd = finite_diff_grad(
                |q| a.forward(q, &o).unwrap().log_probs(z)[act],
                p.as_slice(),
                1e-6,
            )
            .unwrap();
            worst = worst.max(max_rel_error(&g, &fd, 1e-4));
            // other heads untouched
            for z2 in (0..3).filter(|z2| *z2 != z) {
                for r in a.head_ranges(&p, z2).unwrap() {
                    assert!(g[r].iter().all(|v| *v == 0.0));
                }
            }
        }
        assert!(worst <= 1e-5, "worst {worst}");
    }

    #[test]
    fn logit_gradient_identity() {
        // with a linear net on input 0, d log pi / d bias = onehot - pi
        let a = PolicyArch::new(1, 1, 0, 3, 1, 1).unwrap();
        let mut p = a.zeros().unwrap();
        p.get_mut("head.pi.0.b").unwrap().copy_from_slice(&[0.1, -0.4, 0.7]);
        let g = a.grad_role_loglik(p.as_slice(), &[0.0], 2, 0).unwrap();
        let pi = a.action_distribution(p.as_slice(), &[0.0], 0).unwrap();
        let b = p.range("head.pi.0.b").unwrap();
        for i in 0..3 {
            let expected = if i == 2 { 1.0 } else { 0.0 } - pi[i];
            assert!((g[b.start + i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn role0_restriction_masks() {
        let a = arch();
        let layout = a.zeros().unwrap();
        let n = layout.len();
        let mut head1 = vec![0.0; n];
        for r in a.head_ranges(&layout, 1).unwrap() {
            head1[r].iter_mut().for_each(|v| *v = 1.0);
        }
        assert!(a.restrict_to_role0(&layout, &head1).unwrap().iter().all(|v| *v == 0.0));

        let mut head0 = vec![0.0; n];
        for r in a.head_ranges(&layout, 0).unwrap() {
            head0[r].iter_mut().for_each(|v| *v = 2.0);
        }
        assert_eq!(a.restrict_to_role0(&layout, &head0).unwrap(), head0);

        let mixed: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let out = a.restrict_to_role0(&layout, &mixed).unwrap();
        for e in layout.registry() {
            let kept = e.name.starts_with("trunk.") || e.name.starts_with("head.pi.0.");
            for i in e.range() {
                assert_eq!(out[i], if kept { mixed[i] } else { 0.0 }, "{}", e.name);
            }
        }
    }

    #[test]
    fn sampling_matches_distribution() {
        let probs = [0.1, 0.25, 0.4, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_categorical(&probs, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&probs, &mut r1), sample_categorical(&probs, &mut r2));
        }
    }
}
