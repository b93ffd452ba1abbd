use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dbos_core::bounds::{run_suite, BoundReport};
use dbos_core::env::EnvKind;
use dbos_core::experiment::{
    aggregate, audit_run_dir, compare_runs, format_per_seed_table, format_table, read_summaries, run_cell,
    resolve_output_dir, run_dir_name, run_sweep, ExperimentConfig, RunSummary,
};
use dbos_core::gradcheck::{run_all, run_family};
use dbos_core::trainer::{evaluate, load_policy_checkpoint, Method, TrainConfig};

#[derive(Parser)]
#[command(name = "dbos", version, about = "Belief-shaping policy training and verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and evaluate its final policy.
    Train {
        /// Flat key = value config; without it the env/method presets are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "coingame")]
        env: EnvKind,
        #[arg(long, default_value = "dbos")]
        method: Method,
        /// Override the step budget.
        #[arg(long)]
        steps: Option<u64>,
        /// Run directory; defaults to the config's output directory plus a run name.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against frozen opponents.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Parameters for the non-shaper seats; defaults to the same checkpoint.
        #[arg(long)]
        opponent: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        greedy: bool,
    },
    /// Compare hand-written gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One of mlp, predictor, role_loglik, critic_belief, gbos, coefficients.
        #[arg(long)]
        family: Option<String>,
    },
    /// Check the belief-dynamics bounds; exits nonzero on any violation.
    VerifyBounds {
        /// lipschitz, belief_error, log_conversion, chain, gradient_error,
        /// sufficient_statistic or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run every (method, k, seed) cell of a config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired per-seed comparison against a baseline method.
    Compare {
        /// Summary CSV written by `sweep`.
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long, default_value = "ppo")]
        baseline: Method,
    },
    /// Check that a run directory is complete.
    Audit {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn print_summary(row: &RunSummary) {
    match row.score() {
        Some(s) if row.is_ok() => {
            let se = row.win_se.or(row.return_se).unwrap_or(f64::NAN);
            println!("{} & {s:.3} ± {se:.3}", row.label());
        }
        _ => println!("{} seed {}: failed: {}", row.label(), row.seed, row.error),
    }
}

fn report_bounds(rep: &BoundReport) {
    let mut checks: Vec<&str> = rep.trials.iter().map(|t| t.check.as_str()).collect();
    checks.sort_unstable();
    checks.dedup();
    for c in checks {
        let n = rep.trials_for(c).count();
        let v = rep.trials_for(c).filter(|t| t.violation).count();
        println!("{c}: {n} trials, {v} violations, max measured {:.3e}", rep.max_measured(c));
    }
    for (k, v) in &rep.summary {
        println!("{k} = {v}");
    }
}

fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    env: EnvKind,
    method: Method,
    steps: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut cfg, root) = match config {
        Some(path) => {
            let exp = ExperimentConfig::load(&path).with_context(|| format!("reading {}", path.display()))?;
            if exp.methods.len() != 1 || exp.ks.len() != 1 {
                bail!("train runs a single method and horizon; use `sweep` for lists");
            }
            (exp.base.clone(), exp.resolved_output_dir())
        }
        None => (TrainConfig::preset(env, method), resolve_output_dir(Path::new("runs"))),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.ppo.total_steps = n;
    }
    let dir = out.unwrap_or_else(|| root.join(run_dir_name(&cfg)));
    eprintln!(
        "training {} on {} for {} steps into {}",
        cfg.method.name(),
        cfg.env.name(),
        cfg.ppo.total_steps,
        dir.display()
    );
    let row = run_cell(&cfg, &dir)?;
    print_summary(&row);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Train {
            config,
            seed,
            env,
            method,
            steps,
            out,
        } => train(config, seed, env, method, steps, out)?,
        Command::Eval {
            ckpt,
            opponent,
            episodes,
            seed,
            greedy,
        } => {
            let (env, arch, theta) = load_policy_checkpoint(&ckpt)?;
            let frozen = match opponent {
                Some(p) => {
                    let (env2, arch2, th) = load_policy_checkpoint(&p)?;
                    if env2 != env || arch2 != arch {
                        bail!("opponent checkpoint does not match {}", ckpt.display());
                    }
                    th
                }
                None => theta.clone(),
            };
            let m = evaluate(&arch, theta.as_slice(), frozen.as_slice(), env, episodes, seed, greedy)?;
            println!("{}", serde_json::to_string(&m)?);
            match (m.win_rate, m.win_se) {
                (Some(w), Some(se)) => println!("win rate {w:.3} ± {se:.3}"),
                _ => println!("mean return {:.3} ± {:.3}", m.mean_return, m.return_se),
            }
        }
        Command::Gradcheck {
            instances,
            seed,
            family,
        } => {
            let results = match family {
                Some(f) => vec![run_family(&f, instances, seed)?],
                None => run_all(instances, seed)?,
            };
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} {}: {} instances, max rel error {:.2e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.family,
                    r.instances,
                    r.max_rel_error
                );
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::VerifyBounds { suite, out, seed } => {
            let rep = run_suite(&suite, seed)?;
            report_bounds(&rep);
            if let Some(p) = out {
                fs::write(&p, serde_json::to_string_pretty(&rep)?)?;
            }
            if !rep.passed() {
                eprintln!("{} violations", rep.violations());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep { config } => {
            let exp = ExperimentConfig::load(&config)?;
            let rows = run_sweep(&exp, print_summary)?;
            let agg = aggregate(&rows);
            println!("\n{}", format_table(&agg));
            println!("{}", format_per_seed_table(&agg));
            if rows.iter().any(|r| !r.is_ok()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Compare { summaries, baseline } => {
            let rows = read_summaries(&summaries)?;
            let agg = aggregate(&rows);
            print!("{}", format_table(&agg));
            println!("{}", compare_runs(&rows, baseline)?.render());
        }
        Command::Audit { run_dir } => {
            let row = audit_run_dir(&run_dir)?;
            println!("complete");
            print_summary(&row);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
