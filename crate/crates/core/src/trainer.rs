//! PPO co-training over parallel hidden-role environments with belief tracking,
//! the Bayes-factor reward baseline and the belief-shaping gradient.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbm::{observer_mean_intrinsic, BbmConfig};
use crate::belief::{BeliefMatrix, Stabilization};
use crate::buffer::{compute_gae, EnvRollout, RolloutBuffer, StepRecord};
use crate::critic::CriticArch;
use crate::env::{EnvDescriptor, EnvKind, HiddenRoleEnv};
use crate::error::{DbosError, Result};
use crate::policy::{argmax, sample_categorical, PolicyArch};
use crate::shaping::{critic_samples, inject_correction, ShapingConfig, ShapingContext, ShapingDiagnostics};
use crate::tensor::{
    clip_by_norm, l2_norm, load_checkpoint, save_checkpoint, Adam, CheckpointHeader, Optimizer, ParamVector,
};
use crate::tom::{proxy_observation, LstmState, PredictorArch, PredictorSequence, ProxyMode};

// RNG stream ids. Each consumer owns its stream so that enabling one
// component never shifts another's random draws.
const STREAM_POLICY_INIT: u64 = 1;
const STREAM_CRITIC_INIT: u64 = 2;
const STREAM_PREDICTOR_INIT: u64 = 3;
const STREAM_PPO_SHUFFLE: u64 = 4;
const STREAM_CRITIC_SHUFFLE: u64 = 5;
const STREAM_PREDICTOR_SHUFFLE: u64 = 6;
const STREAM_ENV_RESET: u64 = 100;
const STREAM_ENV_ACTION: u64 = 1000;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ppo,
    Bbm,
    Dbos,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ppo => "ppo",
            Method::Bbm => "bbm",
            Method::Dbos => "dbos",
        }
    }
}

impl FromStr for Method {
    type Err = DbosError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Method::Ppo),
            "bbm" => Ok(Method::Bbm),
            "dbos" => Ok(Method::Dbos),
            other => Err(DbosError::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub n_envs: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: u64,
}

impl PpoConfig {
    pub fn for_env(env: EnvKind) -> Self {
        Self {
            n_envs: 16,
            horizon: 32,
            epochs: 2,
            minibatches: 2,
            lr: 5e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            ent_coef: if env.is_avalon() { 0.02 } else { 0.01 },
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            total_steps: 2_000_000,
        }
    }

    pub fn steps_per_iteration(&self) -> u64 {
        (self.n_envs * self.horizon) as u64
    }

    /// Rollouts needed to cover the step budget.
    pub fn iterations(&self) -> u64 {
        self.total_steps.div_ceil(self.steps_per_iteration())
    }

    /// Optimizer steps per rollout, the divisor for the shaping correction.
    pub fn updates_per_rollout(&self) -> usize {
        self.epochs * self.minibatches
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let bad = |m: &str| Err(DbosError::Config(m.to_string()));
        if self.n_envs == 0 || self.horizon == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("n_envs, horizon, epochs and minibatches must be >= 1");
        }
        if (self.n_envs * self.horizon * n_agents) % self.minibatches != 0 {
            return bad("minibatch count must divide the sample count");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.clip_eps >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("lr and max_grad_norm must be positive, clip_eps non-negative");
        }
        if !(self.ent_coef >= 0.0) || !(self.vf_coef >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub critic_hidden: usize,
    pub critic_layers: usize,
    pub predictor_hidden: usize,
    pub predictor_emb: usize,
}

impl ModelConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let hidden = if env.is_avalon() { 128 } else { 64 };
        Self {
            hidden,
            hidden_layers: 2,
            critic_hidden: hidden,
            critic_layers: 2,
            predictor_hidden: 64,
            predictor_emb: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub method: Method,
    pub proxy: ProxyMode,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub shaping: ShapingConfig,
    pub bbm: BbmConfig,
    pub model: ModelConfig,
    pub critic_lr: f64,
    pub predictor_lr: f64,
    pub eval_episodes: usize,
    pub greedy_eval: bool,
}

impl TrainConfig {
    pub fn preset(env: EnvKind, method: Method) -> Self {
        let avalon = env.is_avalon();
        let mut shaping = ShapingConfig::new(1, if avalon { 1.0 } else { 0.5 }).expect("valid preset");
        shaping.role0_restrict = avalon;
        Self {
            env,
            method,
            proxy: ProxyMode::Canonical,
            seed: 42,
            ppo: PpoConfig::for_env(env),
            shaping,
            bbm: BbmConfig { lambda: 0.5 },
            model: ModelConfig::for_env(env),
            critic_lr: 5e-4,
            predictor_lr: 1e-3,
            eval_episodes: 100,
            greedy_eval: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.env.descriptor();
        self.ppo.validate(d.n_agents)?;
        self.shaping.validate()?;
        BbmConfig::new(self.bbm.lambda)?;
        if !(self.critic_lr > 0.0) || !(self.predictor_lr > 0.0) {
            return Err(DbosError::Config("learning rates must be positive".into()));
        }
        if self.model.hidden == 0 || self.model.critic_hidden == 0 || self.model.predictor_hidden == 0 {
            return Err(DbosError::Config("hidden sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn policy_arch(&self) -> Result<PolicyArch> {
        let d = self.env.descriptor();
        PolicyArch::new(
            d.obs_dim,
            self.model.hidden,
            self.model.hidden_layers,
            d.n_actions,
            d.n_policy_roles,
            d.n_belief_roles,
        )
    }
}

/// Per-rollout PPO statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// Norm of the sum of every injected shaping step.
    pub injected_total_norm: f64,
    pub updates: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub shaper_return: Option<f64>,
    pub shaper_team_return: Option<f64>,
    pub other_team_return: Option<f64>,
    pub win_rate: Option<f64>,
    pub ppo: PpoStats,
    pub intrinsic_mean: f64,
    pub critic_loss: Option<f64>,
    pub predictor_loss: Option<f64>,
    pub predictor_dim_error: Option<Vec<f64>>,
    pub shaping: Option<ShapingDiagnostics>,
    pub belief_min: f64,
    pub belief_max_sum_err: f64,
    pub all_finite: bool,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeStats {
    shaper_return: f64,
    shaper_team: f64,
    other_team: f64,
    won: Option<bool>,
}

struct EnvSlot {
    env: Box<dyn HiddenRoleEnv>,
    obs: Vec<Vec<f64>>,
    beliefs: BeliefMatrix,
    lstm: Vec<LstmState>,
    returns: Vec<f64>,
    reset_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
}

impl EnvSlot {
    fn start_episode(&mut self, n_roles: usize, lstm_hidden: usize) {
        let seed = self.reset_rng.next_u64();
        self.obs = self.env.reset(seed);
        self.beliefs = BeliefMatrix::uniform(&self.env.observers(), n_roles);
        self.lstm = vec![LstmState::zeros(lstm_hidden); self.env.descriptor().n_observers];
        self.returns = vec![0.0; self.obs.len()];
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    desc: EnvDescriptor,
    policy: PolicyArch,
    theta: ParamVector,
    opt: Adam,
    critic: Option<(CriticArch, ParamVector, Optimizer)>,
    predictor: Option<(PredictorArch, ParamVector, Optimizer)>,
    slots: Vec<EnvSlot>,
    ppo_rng: ChaCha8Rng,
    critic_rng: ChaCha8Rng,
    predictor_rng: ChaCha8Rng,
    iteration: u64,
    env_steps: u64,
    pending_episodes: Vec<EpisodeStats>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let desc = cfg.env.descriptor();
        let policy = cfg.policy_arch()?;
        let theta = policy.init(&mut stream(cfg.seed, STREAM_POLICY_INIT))?;
        let opt = Adam::new(theta.len(), cfg.ppo.lr);
        let critic = if cfg.method == Method::Dbos {
            let arch = CriticArch::new(
                desc.obs_dim,
                desc.n_observers,
                desc.n_belief_roles,
                cfg.model.critic_hidden,
                cfg.model.critic_layers,
            )?;
            let phi = arch.init(&mut stream(cfg.seed, STREAM_CRITIC_INIT))?;
            let opt = Optimizer::Adam(Adam::new(phi.len(), cfg.critic_lr));
            Some((arch, phi, opt))
        } else {
            None
        };
        let predictor = if cfg.proxy == ProxyMode::Estimated {
            let arch = PredictorArch::new(
                desc.obs_dim,
                cfg.model.predictor_hidden,
                cfg.model.predictor_emb,
                desc.n_observers,
                desc.n_role_labels,
            )?;
            let p = arch.init(&mut stream(cfg.seed, STREAM_PREDICTOR_INIT))?;
            let opt = Optimizer::Adam(Adam::new(p.len(), cfg.predictor_lr));
            Some((arch, p, opt))
        } else {
            None
        };
        let mut slots = Vec::with_capacity(cfg.ppo.n_envs);
        for e in 0..cfg.ppo.n_envs as u64 {
            let mut slot = EnvSlot {
                env: cfg.env.make(),
                obs: Vec::new(),
                beliefs: BeliefMatrix::uniform(&[], desc.n_belief_roles),
                lstm: Vec::new(),
                returns: Vec::new(),
                reset_rng: stream(cfg.seed, STREAM_ENV_RESET + e),
                action_rng: stream(cfg.seed, STREAM_ENV_ACTION + e),
            };
            slot.start_episode(desc.n_belief_roles, cfg.model.predictor_hidden);
            slots.push(slot);
        }
        Ok(Self {
            ppo_rng: stream(cfg.seed, STREAM_PPO_SHUFFLE),
            critic_rng: stream(cfg.seed, STREAM_CRITIC_SHUFFLE),
            predictor_rng: stream(cfg.seed, STREAM_PREDICTOR_SHUFFLE),
            cfg,
            desc,
            policy,
            theta,
            opt,
            critic,
            predictor,
            slots,
            iteration: 0,
            env_steps: 0,
            pending_episodes: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &PolicyArch {
        &self.policy
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn critic_params(&self) -> Option<&ParamVector> {
        self.critic.as_ref().map(|c| &c.1)
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Current belief matrix of every environment slot.
    pub fn current_beliefs(&self) -> Vec<&BeliefMatrix> {
        self.slots.iter().map(|s| &s.beliefs).collect()
    }

    fn stab(&self) -> Stabilization {
        self.cfg.shaping.stab
    }

    /// Plays `horizon` steps in every environment with the current parameters.
    pub fn collect_rollout(&mut self) -> Result<RolloutBuffer> {
        let horizon = self.cfg.ppo.horizon;
        let stab = self.stab();
        let nz = self.desc.n_belief_roles;
        let lstm_hidden = self.cfg.model.predictor_hidden;
        let method = self.cfg.method;
        let bbm_lambda = self.cfg.bbm.lambda;
        let proxy_mode = self.cfg.proxy;
        let kind = self.cfg.env;
        let th = self.theta.as_slice();
        let policy = &self.policy;
        let predictor = self.predictor.as_ref().map(|(a, p, _)| (a, p.as_slice()));
        let mut envs = Vec::with_capacity(self.slots.len());
        let mut finished = Vec::new();
        for (e, slot) in self.slots.iter_mut().enumerate() {
            let predictor_init = slot.lstm.clone();
            let mut steps = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let roles = slot.env.policy_roles();
                let shaper = slot.env.shaper();
                let shaper_role = slot.env.shaper_role();
                let observers = slot.env.observers();
                let labels: Vec<usize> = observers.iter().map(|&o| slot.env.perceived_role(o)).collect();
                let mut actions = Vec::with_capacity(roles.len());
                let mut logp = Vec::with_capacity(roles.len());
                let mut values = Vec::with_capacity(roles.len());
                let mut shaper_fwd = None;
                for (i, &z) in roles.iter().enumerate() {
                    let fwd = policy.forward(th, &slot.obs[i])?;
                    let a = sample_categorical(&fwd.probs(z), &mut slot.action_rng);
                    actions.push(a);
                    logp.push(fwd.log_probs(z)[a]);
                    values.push(fwd.value(z));
                    if i == shaper {
                        shaper_fwd = Some(fwd);
                    }
                }
                let shaper_fwd = shaper_fwd.expect("shaper is one of the agents");
                let a_shaper = actions[shaper];
                let mut proxies = Vec::with_capacity(observers.len());
                let mut ells = Vec::with_capacity(observers.len());
                for (j, &label) in labels.iter().enumerate() {
                    let proxy = proxy_observation(
                        proxy_mode,
                        &slot.obs[shaper],
                        j,
                        label,
                        predictor.map(|(a, p)| (a, p)),
                        &mut slot.lstm[j],
                    )?;
                    let ell = if proxy_mode == ProxyMode::Canonical {
                        policy.loglik_from_forward(&shaper_fwd, a_shaper)
                    } else {
                        policy.role_loglik_vector(th, &proxy, a_shaper)?
                    };
                    proxies.push(proxy);
                    ells.push(ell);
                }
                let intrinsic = if method == Method::Bbm {
                    let rows: Vec<&[f64]> = (0..observers.len()).map(|j| slot.beliefs.row(j)).collect();
                    observer_mean_intrinsic(&ells, &rows, shaper_role, bbm_lambda)?
                } else {
                    0.0
                };
                let beliefs_before = slot.beliefs.clone();
                slot.beliefs.update(&ells, &stab)?;
                let res = slot
                    .env
                    .step(&actions)
                    .map_err(|err| DbosError::Env { env_id: e, message: err.to_string() })?;
                for (r, v) in slot.returns.iter_mut().zip(&res.rewards) {
                    *r += v;
                }
                steps.push(StepRecord {
                    obs: std::mem::take(&mut slot.obs),
                    actions,
                    logp,
                    values,
                    roles: roles.clone(),
                    rewards: res.rewards,
                    intrinsic,
                    done: res.done,
                    shaper,
                    shaper_role,
                    observers,
                    labels,
                    beliefs: beliefs_before,
                    proxies,
                    ells,
                });
                if res.done {
                    let (mut st, mut nt, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
                    for (i, r) in slot.returns.iter().enumerate() {
                        if kind.on_shaper_side(i, roles[i]) {
                            st += r;
                            nt += 1;
                        } else {
                            so += r;
                            no += 1;
                        }
                    }
                    finished.push(EpisodeStats {
                        shaper_return: slot.returns[shaper],
                        shaper_team: st / nt.max(1) as f64,
                        other_team: so / no.max(1) as f64,
                        won: res.outcome.as_deref().and_then(|o| kind.shaper_won(o)),
                    });
                    slot.start_episode(nz, lstm_hidden);
                } else {
                    slot.obs = res.obs;
                }
            }
            let roles = slot.env.policy_roles();
            let bootstrap_values = roles
                .iter()
                .enumerate()
                .map(|(i, &z)| Ok(policy.forward(th, &slot.obs[i])?.value(z)))
                .collect::<Result<Vec<f64>>>()?;
            envs.push(EnvRollout {
                steps,
                bootstrap_values,
                predictor_init,
            });
        }
        self.env_steps += self.cfg.ppo.steps_per_iteration();
        self.pending_episodes.extend(finished);
        Ok(RolloutBuffer { envs })
    }

    /// One rollout followed by critic, predictor and policy updates.
    pub fn iteration(&mut self) -> Result<IterationMetrics> {
        let started = Instant::now();
        let buffer = self.collect_rollout()?;
        buffer.validate()?;
        let ppo = self.cfg.ppo;

        let mut belief_min = f64::INFINITY;
        let mut belief_max_sum_err: f64 = 0.0;
        let mut intrinsic_sum = 0.0;
        for env in &buffer.envs {
            for s in &env.steps {
                belief_min = belief_min.min(s.beliefs.min_entry());
                for j in 0..s.beliefs.n_observers() {
                    let sum: f64 = s.beliefs.row(j).iter().sum();
                    belief_max_sum_err = belief_max_sum_err.max((sum - 1.0).abs());
                }
                intrinsic_sum += s.intrinsic;
            }
        }
        for s in &self.slots {
            belief_min = belief_min.min(s.beliefs.min_entry());
        }

        let (mut predictor_loss, mut predictor_dim_error) = (None, None);
        if let Some((arch, params, opt)) = self.predictor.as_mut() {
            let seqs = predictor_sequences(&buffer, self.desc.n_observers);
            let stats = arch.train_predictor(params, &seqs, opt, ppo.epochs, ppo.minibatches, &mut self.predictor_rng)?;
            predictor_loss = Some(stats.loss_after);
            predictor_dim_error = Some(arch.per_dim_error(params.as_slice(), &seqs)?);
        }

        let (mut critic_loss, mut shaping, mut g_bos) = (None, None, None);
        if let Some((arch, phi, opt)) = self.critic.as_mut() {
            let returns = buffer.shaper_returns(ppo.gamma)?;
            let data = critic_samples(&buffer, self.cfg.shaping.k, &returns)?;
            if !data.is_empty() {
                let stats = arch.train_critic(phi, &data, opt, ppo.epochs, ppo.minibatches, &mut self.critic_rng)?;
                critic_loss = Some(stats.loss_after);
            }
            let ctx = ShapingContext {
                policy: &self.policy,
                critic: arch,
                phi: phi.as_slice(),
                buffer: &buffer,
            };
            let g = ctx.compute_gbos(&self.theta, &self.cfg.shaping)?;
            shaping = Some(g.diagnostics);
            g_bos = Some(g.grad);
        }

        let stats = ppo_update(
            &self.policy,
            &mut self.theta,
            &mut self.opt,
            &buffer,
            &ppo,
            self.cfg.method == Method::Bbm,
            g_bos.as_deref(),
            &mut self.ppo_rng,
        )?;

        let episodes = std::mem::take(&mut self.pending_episodes);
        let mean = |f: &dyn Fn(&EpisodeStats) -> f64| {
            (!episodes.is_empty()).then(|| episodes.iter().map(f).sum::<f64>() / episodes.len() as f64)
        };
        let wins: Vec<bool> = episodes.iter().filter_map(|e| e.won).collect();
        let all_finite = [stats.policy_loss, stats.value_loss, stats.entropy, stats.grad_norm]
            .iter()
            .chain(critic_loss.iter())
            .chain(predictor_loss.iter())
            .all(|v| v.is_finite())
            && self.theta.is_finite();
        self.iteration += 1;
        let n_steps = buffer.n_envs() * buffer.horizon();
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            episodes: episodes.len(),
            shaper_return: mean(&|e| e.shaper_return),
            shaper_team_return: mean(&|e| e.shaper_team),
            other_team_return: mean(&|e| e.other_team),
            win_rate: (!wins.is_empty()).then(|| wins.iter().filter(|w| **w).count() as f64 / wins.len() as f64),
            ppo: stats,
            intrinsic_mean: intrinsic_sum / n_steps.max(1) as f64,
            critic_loss,
            predictor_loss,
            predictor_dim_error,
            shaping,
            belief_min,
            belief_max_sum_err,
            all_finite,
            wall_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs until the step budget is spent, writing one JSON line per iteration.
    pub fn run(&mut self, mut metrics: Option<&mut dyn Write>) -> Result<Vec<IterationMetrics>> {
        let mut all = Vec::new();
        while self.iteration < self.cfg.ppo.iterations() {
            let m = self.iteration()?;
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            if !m.all_finite {
                return Err(DbosError::NonFinite {
                    context: "training losses or parameters",
                    coordinate: m.iteration as usize,
                });
            }
            all.push(m);
        }
        Ok(all)
    }

    pub fn save_policy(&self, path: &Path) -> Result<()> {
        save_policy_checkpoint(path, &self.policy, &self.theta, &self.cfg)
    }
}

/// One training stream per (environment, observer slot): shaper observations
/// as inputs, that observer's own observations as targets.
pub fn predictor_sequences(buffer: &RolloutBuffer, n_observers: usize) -> Vec<PredictorSequence> {
    let mut out = Vec::new();
    for env in &buffer.envs {
        for slot in 0..n_observers {
            let mut seq = PredictorSequence {
                slot,
                labels: Vec::new(),
                inputs: Vec::new(),
                targets: Vec::new(),
                resets: Vec::new(),
                init: env.predictor_init[slot].clone(),
            };
            let mut prev_done = false;
            for s in &env.steps {
                seq.labels.push(s.labels[slot]);
                seq.inputs.push(s.obs[s.shaper].clone());
                seq.targets.push(s.obs[s.observers[slot]].clone());
                seq.resets.push(prev_done);
                prev_done = s.done;
            }
            out.push(seq);
        }
    }
    out
}

/// Sample index into a rollout: `(env, step, agent)`.
#[derive(Debug, Clone, Copy)]
struct SampleRef {
    e: usize,
    t: usize,
    agent: usize,
    adv: f64,
    ret: f64,
}

/// Clipped-surrogate PPO over `epochs x minibatches` optimizer steps. When
/// `g_bos` is given, `g_bos / M` is added to each clipped minibatch gradient.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &PolicyArch,
    theta: &mut ParamVector,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    intrinsic_to_shaper: bool,
    g_bos: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats> {
    let mut samples = Vec::new();
    for (e, env) in buffer.envs.iter().enumerate() {
        let n_agents = env.bootstrap_values.len();
        let dones: Vec<bool> = env.steps.iter().map(|s| s.done).collect();
        for agent in 0..n_agents {
            let rewards: Vec<f64> = env
                .steps
                .iter()
                .map(|s| {
                    let bonus = if intrinsic_to_shaper && s.shaper == agent { s.intrinsic } else { 0.0 };
                    s.rewards[agent] + bonus
                })
                .collect();
            let values: Vec<f64> = env.steps.iter().map(|s| s.values[agent]).collect();
            let (adv, ret) = compute_gae(&rewards, &values, &dones, env.bootstrap_values[agent], cfg.gamma, cfg.gae_lambda)?;
            for t in 0..env.steps.len() {
                samples.push(SampleRef {
                    e,
                    t,
                    agent,
                    adv: adv[t],
                    ret: ret[t],
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(DbosError::Data("empty rollout".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.adv).sum::<f64>() / n;
    let std = (samples.iter().map(|s| (s.adv - mean).powi(2)).sum::<f64>() / n).sqrt();
    for s in &mut samples {
        s.adv = (s.adv - mean) / (std + 1e-8);
    }

    let m_updates = cfg.updates_per_rollout();
    let spec = policy.spec();
    let n_actions = policy.n_actions;
    let n_roles = policy.n_roles;
    let mut stats = PpoStats::default();
    let mut injected_total = g_bos.map(|g| vec![0.0; g.len()]);
    let mut grad = vec![0.0; theta.len()];
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mb_size = samples.len() / cfg.minibatches;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / chunk.len() as f64;
            let (mut pl, mut vl, mut ent, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &i in chunk {
                let s = samples[i];
                let step = &buffer.envs[s.e].steps[s.t];
                let z = step.roles[s.agent];
                let a = step.actions[s.agent];
                let fwd = policy.forward(theta.as_slice(), &step.obs[s.agent])?;
                let p = fwd.probs(z);
                let lp = fwd.log_probs(z);
                let log_ratio = lp[a] - step.logp[s.agent];
                let ratio = log_ratio.exp();
                let unclipped = ratio * s.adv;
                let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                let surr = unclipped.min(clipped_ratio * s.adv);
                let active = unclipped <= clipped_ratio * s.adv;
                if !active {
                    clipped += 1.0;
                }
                let h: f64 = -p.iter().zip(&lp).map(|(pi, l)| pi * l).sum::<f64>();
                let v = fwd.value(z);
                pl -= surr;
                vl += 0.5 * (v - s.ret).powi(2);
                ent += h;
                kl += (ratio - 1.0) - log_ratio;

                let mut up = vec![0.0; spec.output];
                let d_lp = if active { -unclipped * inv } else { 0.0 };
                for k in 0..n_actions {
                    let onehot = if k == a { 1.0 } else { 0.0 };
                    // policy term, then the entropy bonus
                    up[z * n_actions + k] = d_lp * (onehot - p[k]) + cfg.ent_coef * inv * p[k] * (lp[k] + h);
                }
                up[n_roles * n_actions + z] = cfg.vf_coef * (v - s.ret) * inv;
                policy.backward(theta.as_slice(), &fwd, &up, &mut grad)?;
            }
            let loss = (pl + cfg.vf_coef * vl - cfg.ent_coef * ent) * inv;
            if !loss.is_finite() {
                return Err(DbosError::NonFinite {
                    context: "ppo minibatch loss",
                    coordinate: stats.updates,
                });
            }
            stats.policy_loss += pl * inv;
            stats.value_loss += vl * inv;
            stats.entropy += ent * inv;
            stats.approx_kl += kl * inv;
            stats.clip_fraction += clipped * inv;
            stats.grad_norm += clip_by_norm(&mut grad, cfg.max_grad_norm);
            if let Some(g) = g_bos {
                inject_correction(&mut grad, g, m_updates)?;
                if let Some(tot) = injected_total.as_mut() {
                    for (t, v) in tot.iter_mut().zip(g) {
                        *t += v / m_updates as f64;
                    }
                }
            }
            opt.step(theta.as_mut_slice(), &grad)?;
            stats.updates += 1;
        }
    }
    let u = stats.updates.max(1) as f64;
    stats.policy_loss /= u;
    stats.value_loss /= u;
    stats.entropy /= u;
    stats.approx_kl /= u;
    stats.clip_fraction /= u;
    stats.grad_norm /= u;
    stats.injected_total_norm = injected_total.map_or(0.0, |t| l2_norm(&t));
    Ok(stats)
}

pub fn save_policy_checkpoint(path: &Path, arch: &PolicyArch, theta: &ParamVector, cfg: &TrainConfig) -> Result<()> {
    let header = CheckpointHeader::new("policy", cfg.seed, theta)
        .with_spec("policy", arch.spec())
        .with_meta("env", cfg.env.name())
        .with_meta("method", cfg.method.name())
        .with_meta("arch", serde_json::to_string(arch)?);
    save_checkpoint(path, &header, theta)
}

/// Loads a policy checkpoint and checks it against `env`.
pub fn load_policy_checkpoint(path: &Path) -> Result<(EnvKind, PolicyArch, ParamVector)> {
    let (header, params) = load_checkpoint(path)?;
    if header.kind != "policy" {
        return Err(DbosError::Checkpoint(format!("expected a policy checkpoint, found `{}`", header.kind)));
    }
    let env: EnvKind = header.meta("env")?.parse()?;
    let arch: PolicyArch = serde_json::from_str(header.meta("arch")?)?;
    let d = env.descriptor();
    if arch.obs_dim != d.obs_dim || arch.n_actions != d.n_actions || arch.n_roles != d.n_policy_roles {
        return Err(DbosError::Checkpoint(format!("policy shape does not fit {}", env.name())));
    }
    if arch.zeros()?.registry() != params.registry() {
        return Err(DbosError::Checkpoint("parameter layout does not match the architecture".into()));
    }
    Ok((env, arch, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub win_rate: Option<f64>,
    pub win_se: Option<f64>,
    pub mean_return: f64,
    pub return_se: f64,
}

/// Mean and standard error (sample std over `sqrt(n)`).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt() / (n as f64).sqrt())
}

/// Plays `episodes` games with the shaper's side on `theta_shaper` and
/// everyone else on the frozen parameters.
pub fn evaluate(
    arch: &PolicyArch,
    theta_shaper: &[f64],
    theta_frozen: &[f64],
    env: EnvKind,
    episodes: usize,
    seed: u64,
    greedy: bool,
) -> Result<EvalMetrics> {
    if episodes == 0 {
        return Err(DbosError::Config("evaluation needs at least one episode".into()));
    }
    let expected = arch.zeros()?.len();
    if theta_shaper.len() != expected || theta_frozen.len() != expected {
        return Err(DbosError::Checkpoint("evaluation parameters do not match the architecture".into()));
    }
    let mut game = env.make();
    let mut reset_rng = stream(seed, STREAM_ENV_RESET);
    let mut action_rng = stream(seed, STREAM_ENV_ACTION);
    let mut returns = Vec::with_capacity(episodes);
    let mut wins = Vec::new();
    for _ in 0..episodes {
        let mut obs = game.reset(reset_rng.next_u64());
        let shaper = game.shaper();
        let mut total = 0.0;
        loop {
            let roles = game.policy_roles();
            let mut actions = Vec::with_capacity(roles.len());
            for (i, &z) in roles.iter().enumerate() {
                let th = if env.on_shaper_side(i, z) { theta_shaper } else { theta_frozen };
                let probs = arch.action_distribution(th, &obs[i], z)?;
                actions.push(if greedy {
                    argmax(&probs)
                } else {
                    sample_categorical(&probs, &mut action_rng)
                });
            }
            let res = game.step(&actions)?;
            total += res.rewards[shaper];
            if res.done {
                if let Some(w) = res.outcome.as_deref().and_then(|o| env.shaper_won(o)) {
                    wins.push(if w { 1.0 } else { 0.0 });
                }
                break;
            }
            obs = res.obs;
        }
        returns.push(total);
    }
    let (mean_return, return_se) = mean_se(&returns);
    let (win_rate, win_se) = if wins.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_se(&wins);
        (Some(m), Some(s))
    };
    Ok(EvalMetrics {
        episodes,
        win_rate,
        win_se,
        mean_return,
        return_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_accounting() {
        let mut p = PpoConfig::for_env(EnvKind::CoinGame);
        p.total_steps = 1000;
        assert_eq!(p.steps_per_iteration(), 512);
        assert_eq!(p.iterations(), 2);
        assert_eq!(p.updates_per_rollout(), 4);
        p.minibatches = 3;
        assert!(p.validate(4).is_err());
    }

    #[test]
    fn standard_error_formula() {
        let (m, se) = mean_se(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(m, 0.5);
        let sd = (4.0f64 * 0.25 / 3.0).sqrt();
        assert!((se - sd / 2.0).abs() < 1e-15);
        assert_eq!(mean_se(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Ppo, Method::Bbm, Method::Dbos] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("lola".parse::<Method>().is_err());
    }
}
