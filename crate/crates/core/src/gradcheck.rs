//! Central-difference checks for every hand-written gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{unroll_chain, BeliefMatrix, Stabilization};
use crate::critic::CriticArch;
use crate::env::EnvKind;
use crate::error::Result;
use crate::policy::PolicyArch;
use crate::shaping::{compute_coefficients, ShapingConfig, ShapingContext, ShapingMode};
use crate::tensor::{dot, finite_diff_grad, max_rel_error, mlp_backward, mlp_forward, MlpSpec};
use crate::tom::{LstmState, PredictorArch, PredictorSequence};
use crate::trainer::{TrainConfig, Trainer};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub family: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradcheckResult {
    fn new(family: &str, instances: usize, max_rel_error: f64) -> Self {
        Self {
            family: family.to_string(),
            instances,
            max_rel_error,
            passed: max_rel_error <= TOLERANCE,
        }
    }
}

pub const FAMILIES: [&str; 6] = ["mlp", "predictor", "role_loglik", "critic_belief", "gbos", "coefficients"];

fn uniform_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn random_belief<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    crate::bounds::random_belief(n, 0.02, rng)
}

/// MLP parameter and input gradients for random shapes.
pub fn check_mlp(instances: usize, seed: u64) -> Result<GradcheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let spec = MlpSpec::new(
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..5),
            rng.gen_range(0..3),
        )?;
        let mut p = vec![0.0; spec.param_count()];
        spec.init_uniform(&mut p, &mut rng)?;
        p.iter_mut().for_each(|v| *v *= 2.0);
        let x = uniform_vec(&mut rng, spec.input, 1.5);
        let u = uniform_vec(&mut rng, spec.output, 1.0);
        let (g, gx) = mlp_backward(&p, &spec, &x, &u)?;
        let fd = finite_diff_grad(|q| dot(&mlp_forward(q, &spec, &x).expect("shapes"), &u), &p, FD_STEP)?;
        let fdx = finite_diff_grad(|xx| dot(&mlp_forward(&p, &spec, xx).expect("shapes"), &u), &x, FD_STEP)?;
        worst = worst.max(max_rel_error(&g, &fd, REL_FLOOR)).max(max_rel_error(&gx, &fdx, REL_FLOOR));
    }
    Ok(GradcheckResult::new("mlp", instances, worst))
}

/// Backpropagation through time in the recurrent observation predictor.
pub fn check_predictor(instances: usize, seed: u64) -> Result<GradcheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let arch = PredictorArch::new(
            rng.gen_range(1..5),
            rng.gen_range(1..6),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..3),
        )?;
        let p = arch.init(&mut rng)?;
        let t = rng.gen_range(1..7);
        let seq = PredictorSequence {
            slot: rng.gen_range(0..arch.n_slots),
            labels: (0..t).map(|_| rng.gen_range(0..arch.n_labels)).collect(),
            inputs: (0..t).map(|_| uniform_vec(&mut rng, arch.obs_dim, 1.0)).collect(),
            targets: (0..t).map(|_| uniform_vec(&mut rng, arch.obs_dim, 1.0)).collect(),
            resets: (0..t).map(|s| s > 0 && rng.gen_bool(0.2)).collect(),
            init: LstmState {
                h: uniform_vec(&mut rng, arch.hidden, 1.0),
                c: uniform_vec(&mut rng, arch.hidden, 1.0),
            },
        };
        let mut g = vec![0.0; p.len()];
        arch.accumulate_sequence_grad(p.as_slice(), &seq, 1.0, &mut g)?;
        let fd = finite_diff_grad(|q| arch.sequence_loss(q, &seq).expect("shapes"), p.as_slice(), FD_STEP)?;
        worst = worst.max(max_rel_error(&g, &fd, REL_FLOOR));
    }
    Ok(GradcheckResult::new("predictor", instances, worst))
}

/// `grad_theta log pi(a | o, z)` for every role head.
pub fn check_role_loglik(instances: usize, seed: u64) -> Result<GradcheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let n_roles = rng.gen_range(1..5);
        let arch = PolicyArch::new(
            rng.gen_range(1..6),
            rng.gen_range(1..7),
            rng.gen_range(0..3),
            rng.gen_range(2..5),
            n_roles,
            rng.gen_range(1..=n_roles),
        )?;
        let p = arch.init(&mut rng)?;
        let o = uniform_vec(&mut rng, arch.obs_dim, 1.0);
        let a = rng.gen_range(0..arch.n_actions);
        let z = rng.gen_range(0..n_roles);
        let g = arch.grad_role_loglik(p.as_slice(), &o, a, z)?;
        let fd = finite_diff_grad(
            |q| arch.forward(q, &o).expect("shapes").log_probs(z)[a],
            p.as_slice(),
            FD_STEP,
        )?;
        worst = worst.max(max_rel_error(&g, &fd, REL_FLOOR));
    }
    Ok(GradcheckResult::new("role_loglik", instances, worst))
}

/// Critic value with respect to the stacked observer beliefs.
pub fn check_critic_belief(instances: usize, seed: u64) -> Result<GradcheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let n_obs = rng.gen_range(1..4);
        let n_roles = rng.gen_range(2..5);
        let arch = CriticArch::new(rng.gen_range(1..5), n_obs, n_roles, rng.gen_range(1..7), rng.gen_range(0..3))?;
        let phi = arch.init(&mut rng)?;
        let o = uniform_vec(&mut rng, arch.obs_dim, 1.0);
        let b: Vec<f64> = (0..n_obs).flat_map(|_| random_belief(&mut rng, n_roles)).collect();
        let g = arch.grad_wrt_belief_flat(phi.as_slice(), &o, &b)?;
        let fd = finite_diff_grad(|bb| arch.value_flat(phi.as_slice(), &o, bb).expect("shapes"), &b, FD_STEP)?;
        worst = worst.max(max_rel_error(&g, &fd, REL_FLOOR));
    }
    Ok(GradcheckResult::new("critic_belief", instances, worst))
}

/// Per-step log-likelihood coefficients of a belief chain, with and without
/// the floor mix and at random temperatures.
pub fn check_coefficients(instances: usize, seed: u64) -> Result<GradcheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let n_obs = rng.gen_range(1..4);
        let n_roles = rng.gen_range(2..6);
        let k = rng.gen_range(1..5);
        let alpha = if i % 2 == 0 { 0.0 } else { rng.gen_range(0.01..0.2) };
        let stab = Stabilization::new(rng.gen_range(1.0..2.5), alpha)?;
        let rows: Vec<Vec<f64>> = (0..n_obs).map(|_| random_belief(&mut rng, n_roles)).collect();
        let observers: Vec<usize> = (0..n_obs).collect();
        let start = BeliefMatrix::from_rows(&observers, &rows)?;
        let ells: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| {
                (0..n_obs)
                    .map(|_| (0..n_roles).map(|_| rng.gen_range(0.05f64..1.0).ln()).collect())
                    .collect()
            })
            .collect();
        let upstream = uniform_vec(&mut rng, n_obs * n_roles, 1.0);
        let tape = unroll_chain(&start, &ells, k, &stab)?;
        let coefs = compute_coefficients(&tape, &upstream)?;
        let analytic: Vec<f64> = coefs.into_iter().flatten().flatten().collect();
        let flat: Vec<f64> = ells.iter().flatten().flatten().copied().collect();
        let f = |x: &[f64]| {
            let e: Vec<Vec<Vec<f64>>> = x
                .chunks(n_obs * n_roles)
                .map(|s| s.chunks(n_roles).map(<[f64]>::to_vec).collect())
                .collect();
            let t = unroll_chain(&start, &e, k, &stab).expect("valid chain");
            dot(t.endpoint().as_flat(), &upstream)
        };
        let fd = finite_diff_grad(f, &flat, FD_STEP)?;
        worst = worst.max(max_rel_error(&analytic, &fd, REL_FLOOR));
    }
    Ok(GradcheckResult::new("coefficients", instances, worst))
}

/// Full shaping gradient in direct mode against differences of the mean
/// shaping loss, on rollouts collected from small trainers.
pub fn check_gbos(instances: usize, seed: u64) -> Result<GradcheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let env = if i % 2 == 0 { EnvKind::CoinGame } else { EnvKind::Avalon5 };
        let mut cfg = TrainConfig::preset(env, crate::trainer::Method::Dbos);
        cfg.seed = seed.wrapping_add(i as u64);
        cfg.model.hidden = 4;
        cfg.model.hidden_layers = 1;
        cfg.ppo.n_envs = 2;
        cfg.ppo.horizon = 6;
        cfg.ppo.minibatches = 1;
        cfg.ppo.total_steps = 12;
        let k = rng.gen_range(1..4);
        let alpha = if i % 4 < 2 { 0.0 } else { 0.05 };
        let mut shaping = ShapingConfig::new(k, rng.gen_range(0.1..2.0))?.raw();
        shaping.mode = ShapingMode::Direct;
        shaping.stab = Stabilization::new(rng.gen_range(1.0..2.5), alpha)?;
        cfg.shaping = shaping;
        let mut trainer = Trainer::new(cfg)?;
        let buffer = trainer.collect_rollout()?;
        let d = env.descriptor();
        let critic = CriticArch::new(d.obs_dim, d.n_observers, d.n_belief_roles, 5, 1)?;
        let phi = critic.init(&mut rng)?;
        let ctx = ShapingContext {
            policy: trainer.policy(),
            critic: &critic,
            phi: phi.as_slice(),
            buffer: &buffer,
        };
        let theta = trainer.theta();
        let g = ctx.compute_gbos(theta, &shaping)?.grad;
        let fd = finite_diff_grad(
            |q| ctx.mean_shaping_loss(q, &shaping).expect("valid rollout"),
            theta.as_slice(),
            FD_STEP,
        )?;
        worst = worst.max(max_rel_error(&g, &fd, REL_FLOOR));
    }
    Ok(GradcheckResult::new("gbos", instances, worst))
}

pub fn run_family(family: &str, instances: usize, seed: u64) -> Result<GradcheckResult> {
    match family {
        "mlp" => check_mlp(instances, seed),
        "predictor" => check_predictor(instances, seed),
        "role_loglik" => check_role_loglik(instances, seed),
        "critic_belief" => check_critic_belief(instances, seed),
        "gbos" => check_gbos(instances, seed),
        "coefficients" => check_coefficients(instances, seed),
        other => Err(crate::error::DbosError::Config(format!("unknown gradient family `{other}`"))),
    }
}

pub fn run_all(instances: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    FAMILIES.iter().map(|f| run_family(f, instances, seed)).collect()
}
