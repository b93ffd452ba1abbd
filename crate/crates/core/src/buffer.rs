//! Fixed-horizon on-policy storage and advantage estimation.

use crate::belief::BeliefMatrix;
use crate::error::{check_len, DbosError, Result};
use crate::tom::LstmState;

/// Everything recorded for one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Every agent's observation before acting.
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    /// PPO value estimate of each agent under its own role.
    pub values: Vec<f64>,
    pub roles: Vec<usize>,
    /// Extrinsic rewards per agent.
    pub rewards: Vec<f64>,
    /// Intrinsic reward paid to the shaper (zero unless the Bayes-factor baseline is on).
    pub intrinsic: f64,
    /// The episode ended with this step.
    pub done: bool,
    pub shaper: usize,
    pub shaper_role: usize,
    pub observers: Vec<usize>,
    /// Shaper's label for each observer's role.
    pub labels: Vec<usize>,
    /// Observer beliefs before this step's update.
    pub beliefs: BeliefMatrix,
    /// Observation proxy per observer used for the likelihoods.
    pub proxies: Vec<Vec<f64>>,
    /// Log-likelihood vector per observer at rollout parameters.
    pub ells: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvRollout {
    pub steps: Vec<StepRecord>,
    /// Value of each agent at the observation following the last step.
    pub bootstrap_values: Vec<f64>,
    /// Recurrent predictor state per observer slot when the rollout began.
    pub predictor_init: Vec<LstmState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub envs: Vec<EnvRollout>,
}

/// Generalized advantage estimation over one reward stream.
///
/// `dones[t]` marks that the episode ended after step `t`, which cuts both
/// the bootstrap and the advantage recursion.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    check_len("gae values", n, values.len())?;
    check_len("gae dones", n, dones.len())?;
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_v * nonterminal - values[t];
        last = delta + gamma * lambda * nonterminal * last;
        adv[t] = last;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Discounted reward-to-go with a terminal mask and a final bootstrap.
pub fn discounted_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Result<Vec<f64>> {
    check_len("returns dones", rewards.len(), dones.len())?;
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            acc = 0.0;
        }
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

impl RolloutBuffer {
    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn horizon(&self) -> usize {
        self.envs.first().map_or(0, |e| e.steps.len())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        for (i, e) in self.envs.iter().enumerate() {
            if e.steps.len() != t {
                return Err(DbosError::Env {
                    env_id: i,
                    message: format!("rollout has {} steps, expected {t}", e.steps.len()),
                });
            }
            for s in &e.steps {
                if s.logp.iter().any(|l| *l > 0.0) {
                    return Err(DbosError::Data("positive log-probability in buffer".into()));
                }
                for j in 0..s.beliefs.n_observers() {
                    crate::belief::validate_belief(s.beliefs.row(j))?;
                }
            }
        }
        Ok(())
    }

    /// Window starts `(env, t)` for which `t + k` is inside the rollout and no
    /// episode ends among steps `t .. t + k`.
    pub fn valid_windows(&self, k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if k == 0 {
            return out;
        }
        for (e, env) in self.envs.iter().enumerate() {
            let t_len = env.steps.len();
            for t in 0..t_len.saturating_sub(k) {
                if env.steps[t..t + k].iter().all(|s| !s.done) {
                    out.push((e, t));
                }
            }
        }
        out
    }

    /// Shaper's extrinsic reward-to-go at every step, bootstrapped with the
    /// PPO value of the agent who was the shaper on the last step.
    pub fn shaper_returns(&self, gamma: f64) -> Result<Vec<Vec<f64>>> {
        self.envs
            .iter()
            .map(|env| {
                let rewards: Vec<f64> = env.steps.iter().map(|s| s.rewards[s.shaper]).collect();
                let dones: Vec<bool> = env.steps.iter().map(|s| s.done).collect();
                let boot = env
                    .steps
                    .last()
                    .map_or(0.0, |s| env.bootstrap_values[s.shaper]);
                discounted_returns(&rewards, &dones, boot, gamma)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_terminal_step() {
        let (adv, ret) = compute_gae(&[1.0], &[0.0], &[true], 5.0, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn exact_values_give_zero_advantage() {
        // constant reward 1, gamma 0.5, infinite stream: V = 2
        let n = 6;
        let (adv, _) = compute_gae(&vec![1.0; n], &vec![2.0; n], &vec![false; n], 2.0, 0.5, 0.95).unwrap();
        assert!(adv.iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn no_bootstrap_across_episode_end() {
        let (adv, _) = compute_gae(&[0.0, 0.0], &[0.0, 100.0], &[true, false], 0.0, 0.99, 0.95).unwrap();
        assert_eq!(adv[0], 0.0);
        let r = discounted_returns(&[1.0, 1.0, 1.0], &[false, true, false], 10.0, 0.5).unwrap();
        assert_eq!(r, vec![1.5, 1.0, 6.0]);
    }
}
