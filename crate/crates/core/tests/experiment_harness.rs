use dbos_core::env::EnvKind;
use dbos_core::experiment::{
    aggregate, append_summaries, audit_run_dir, compare_runs, format_per_seed_table, format_table, read_summaries,
    run_cell, run_dir_name, run_sweep, ExperimentConfig, RunSummary, CHECKPOINT_FILE, METRICS_FILE,
};
use dbos_core::shaping::ShapingMode;
use dbos_core::tom::ProxyMode;
use dbos_core::trainer::{load_policy_checkpoint, Method};
use proptest::prelude::*;

const SMALL: &str = "\
# tiny sweep
env = coingame
methods = ppo,dbos
seeds = 42,43
output_dir = sweep
eval_episodes = 4
ppo.n_envs = 2
ppo.horizon = 16
ppo.total_steps = 64
model.hidden = 8
model.critic_hidden = 8
shaping.k = 1,2
";

fn row(method: Method, k: Option<usize>, seed: u64, score: f64) -> RunSummary {
    RunSummary {
        method,
        env: "avalon5".into(),
        proxy: "canonical".into(),
        k,
        seed,
        win_rate: Some(score),
        win_se: Some(0.0),
        mean_return: Some(0.0),
        return_se: Some(0.0),
        eval_episodes: 100,
        env_steps: 10,
        step_budget: 10,
        wall_secs: 1.0,
        status: "ok".into(),
        error: String::new(),
    }
}

#[test]
fn parses_and_applies_overrides() {
    let c = ExperimentConfig::parse(SMALL).unwrap();
    assert_eq!(c.methods, vec![Method::Ppo, Method::Dbos]);
    assert_eq!(c.seeds, vec![42, 43]);
    assert_eq!(c.ks, vec![1, 2]);
    assert_eq!(c.base.ppo.n_envs, 2);
    assert_eq!(c.base.model.hidden, 8);
    assert_eq!(c.base.env, EnvKind::CoinGame);
    // ppo once per seed, dbos per horizon and seed
    assert_eq!(c.cells().len(), 2 + 4);
}

#[test]
fn config_round_trip() {
    let c = ExperimentConfig::parse(SMALL).unwrap();
    let again = ExperimentConfig::parse(&c.to_text()).unwrap();
    assert_eq!(again, c);
    assert_eq!(again.to_text(), c.to_text());
}

#[test]
fn sections_follow_methods() {
    let no_dbos = "env = coingame\nmethods = ppo\nseeds = 1\nshaping.lambda = 2\n";
    assert!(ExperimentConfig::parse(no_dbos).is_err());
    let no_bbm = "env = coingame\nmethods = dbos\nseeds = 1\nbbm.lambda = 2\n";
    assert!(ExperimentConfig::parse(no_bbm).is_err());
    let ppo_only = ExperimentConfig::parse("env = avalon5\nmethods = ppo\nseeds = 1\n").unwrap();
    let text = ppo_only.to_text();
    assert!(!text.contains("shaping.") && !text.contains("bbm."));
}

#[test]
fn rejects_bad_configs() {
    for bad in [
        "methods = ppo\nseeds = 1\n",
        "env = coingame\nseeds = 1\n",
        "env = coingame\nmethods = ppo\nseeds = \n",
        "env = coingame\nmethods = ppo\nseeds = 1,1\n",
        "env = coingame\nmethods = ppo\nseeds = 1\nppo.lr = fast\n",
        "env = coingame\nmethods = ppo\nseeds = 1\nppo.colour = 3\n",
        "env = coingame\nmethods = ppo\nseeds = 1\nseeds = 2\n",
        "env = coingame\nmethods = ppo\nseeds = 1\nppo.minibatches = 7\n",
        "env = coingame\nmethods = ppo\nseeds = 1\njust words\n",
    ] {
        assert!(ExperimentConfig::parse(bad).is_err(), "accepted:\n{bad}");
    }
}

#[test]
fn seed_aggregate_matches_hand_computation() {
    let rows = vec![
        row(Method::Ppo, None, 42, 0.34),
        row(Method::Ppo, None, 43, 0.29),
        row(Method::Ppo, None, 44, 0.40),
    ];
    let agg = aggregate(&rows);
    assert_eq!(agg.len(), 1);
    let mean = (0.34 + 0.29 + 0.40) / 3.0;
    let var = [0.34, 0.29, 0.40].iter().map(|x: &f64| (x - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((agg[0].mean - mean).abs() < 1e-15);
    assert!((agg[0].se - (var / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(format_table(&agg), "PPO (No shaping) & 0.343 ± 0.032\n");
    assert_eq!(
        format_per_seed_table(&agg),
        "Method & Seed 42 & Seed 43 & Seed 44 & Aggregate (Mean ± SE)\n\
         PPO (No shaping) & 0.340 & 0.290 & 0.400 & 0.343 ± 0.032\n"
    );
}

#[test]
fn labels_name_horizon_and_proxy() {
    let mut r = row(Method::Dbos, Some(3), 1, 0.5);
    assert_eq!(r.label(), "D-BOS, k=3");
    r.proxy = ProxyMode::Estimated.name().into();
    assert_eq!(r.label(), "D-BOS, k=3 (Est.)");
    assert_eq!(row(Method::Bbm, None, 1, 0.0).label(), "BBM");
}

#[test]
fn paired_deltas() {
    let mut rows = vec![
        row(Method::Ppo, None, 42, 0.3),
        row(Method::Ppo, None, 43, 0.5),
        row(Method::Dbos, Some(1), 42, 0.4),
        row(Method::Dbos, Some(1), 43, 0.25),
    ];
    let rep = compare_runs(&rows, Method::Ppo).unwrap();
    assert_eq!(rep.rows.len(), 1);
    let r = &rep.rows[0];
    assert!((r.deltas[0].1 - 0.1).abs() < 1e-15);
    assert!((r.deltas[1].1 + 0.25).abs() < 1e-15);
    assert!((r.mean_delta + 0.075).abs() < 1e-15);
    // sample sd of (0.1, -0.25) is 0.35 / sqrt 2, over sqrt 2
    assert!((r.se_delta - 0.175).abs() < 1e-12);
    assert_eq!((r.better, r.worse, r.ties), (1, 1, 0));

    let same: Vec<RunSummary> = rows
        .iter()
        .map(|x| RunSummary {
            win_rate: Some(0.5),
            ..x.clone()
        })
        .collect();
    let rep = compare_runs(&same, Method::Ppo).unwrap();
    assert!(rep.rows[0].deltas.iter().all(|d| d.1 == 0.0));
    assert_eq!(rep.rows[0].ties, 2);

    assert!(compare_runs(&rows, Method::Bbm).is_err());
    rows.pop();
    assert!(compare_runs(&rows, Method::Ppo).is_err());
    assert!(compare_runs(&rows[..2], Method::Ppo).is_err());
}

#[test]
fn failed_rows_are_skipped_in_tables() {
    let mut rows = vec![row(Method::Ppo, None, 1, 0.2), row(Method::Ppo, None, 2, 0.4)];
    rows[1].status = "failed".into();
    let agg = aggregate(&rows);
    assert_eq!(agg[0].per_seed, vec![(1, 0.2)]);
    assert_eq!(agg[0].se, 0.0);
}

#[test]
fn summary_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let mut rows = vec![row(Method::Ppo, None, 1, 0.2), row(Method::Dbos, Some(2), 1, 0.3)];
    rows[1].win_rate = None;
    rows[1].error = "bad, \"quoted\" thing".into();
    append_summaries(&path, &rows[..1]).unwrap();
    append_summaries(&path, &rows[1..]).unwrap();
    assert_eq!(read_summaries(&path).unwrap(), rows);
}

#[test]
fn run_cell_writes_complete_directory() {
    let dir = tempfile::tempdir().unwrap();
    let exp = ExperimentConfig::parse(SMALL).unwrap();
    let cfg = exp.cell(Method::Dbos, 2, 42);
    let run = dir.path().join(run_dir_name(&cfg));
    let summary = run_cell(&cfg, &run).unwrap();
    assert!(summary.is_ok());
    assert_eq!(summary.k, Some(2));
    assert_eq!(summary.env_steps, 64);
    assert_eq!(audit_run_dir(&run).unwrap(), summary);
    let (env, _, _) = load_policy_checkpoint(&run.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(env, EnvKind::CoinGame);
    let lines = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let snapshot = ExperimentConfig::load(&run.join("config.txt")).unwrap();
    assert_eq!(snapshot.cell(Method::Dbos, 2, 42), cfg);

    std::fs::remove_file(run.join(CHECKPOINT_FILE)).unwrap();
    assert!(audit_run_dir(&run).is_err());
}

#[test]
fn sweep_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = ExperimentConfig::parse(SMALL).unwrap();
    exp.output_dir = dir.path().join("out");
    exp.seeds = vec![42];
    exp.ks = vec![1];
    // this cell's run directory is blocked by a plain file
    let blocked = exp.cell(Method::Ppo, 1, 42);
    std::fs::create_dir_all(&exp.output_dir).unwrap();
    std::fs::write(exp.output_dir.join(run_dir_name(&blocked)), "x").unwrap();
    let mut seen = 0;
    let rows = run_sweep(&exp, |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(rows.len(), 2);
    assert!(!rows[0].is_ok() && !rows[0].error.is_empty());
    assert!(rows[1].is_ok());
    let on_disk = read_summaries(&exp.output_dir.join("summary.csv")).unwrap();
    assert_eq!(on_disk, rows);
}

proptest! {
    #[test]
    fn random_configs_round_trip(
        lr in 1e-6f64..1.0,
        gamma in 0.5f64..1.0,
        lambda in 0.0f64..3.0,
        gate in prop::option::of(0.001f64..1.0),
        cap in prop::option::of(0.01f64..10.0),
        ks in prop::collection::vec(1usize..6, 1..4),
        seeds in prop::collection::btree_set(0u64..1000, 1..4),
        direct in any::<bool>(),
        estimated in any::<bool>(),
        alpha in 0.0f64..0.5,
    ) {
        let mut c = ExperimentConfig::parse("env = avalon5\nmethods = dbos,bbm,ppo\nseeds = 1\n").unwrap();
        c.base.ppo.lr = lr;
        c.base.ppo.gamma = gamma;
        c.base.shaping.lambda = lambda;
        c.base.shaping.gate_entropy = gate;
        c.base.shaping.grad_cap = cap;
        c.base.shaping.mode = if direct { ShapingMode::Direct } else { ShapingMode::Coefficient };
        c.base.shaping.stab.alpha_floor = alpha;
        c.base.proxy = if estimated { ProxyMode::Estimated } else { ProxyMode::Canonical };
        c.base.shaping.k = ks[0];
        c.ks = ks;
        c.seeds = seeds.into_iter().collect();
        c.base.seed = c.seeds[0];
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }
}
