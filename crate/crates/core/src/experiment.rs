//! Experiment configuration files, seeded sweeps, result tables and paired
//! comparisons between methods.
//!
//! Config files are flat `key = value` text. Blank lines and lines starting
//! with `#` are ignored. `shaping.*` keys are only accepted when `dbos` is
//! among the methods, `bbm.*` keys only when `bbm` is.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::EnvKind;
use crate::error::{DbosError, Result};
use crate::tom::ProxyMode;
use crate::trainer::{evaluate, load_policy_checkpoint, mean_se, Method, TrainConfig, Trainer};

/// Relative output directories are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "DBOS_OUTPUT_ROOT";

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Added to the run seed for evaluation so evaluation deals differ from the
/// training environments' deals.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Shared settings. Its method, seed and shaping horizon are the first
    /// entries of the lists below.
    pub base: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Shaping horizons swept for `dbos`.
    pub ks: Vec<usize>,
    pub output_dir: PathBuf,
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DbosError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(DbosError::Config(format!("line {}: empty key", i + 1)));
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(DbosError::Config(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { map })
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| DbosError::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// `none` clears the option.
    fn set_opt(&mut self, key: &str, slot: &mut Option<f64>) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *slot = if v == "none" {
                None
            } else {
                Some(v.parse().map_err(|_| DbosError::Config(format!("bad value `{v}` for `{key}`")))?)
            };
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.map.remove(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| DbosError::Config(format!("bad entry `{s}` in `{key}`"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

fn opt_str(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let env: EnvKind = f
            .take("env")?
            .ok_or_else(|| DbosError::Config("missing key `env`".into()))?;
        let methods: Vec<Method> = f
            .list("methods")?
            .ok_or_else(|| DbosError::Config("missing key `methods`".into()))?;
        let seeds: Vec<u64> = f
            .list("seeds")?
            .ok_or_else(|| DbosError::Config("missing key `seeds`".into()))?;
        if methods.is_empty() || seeds.is_empty() {
            return Err(DbosError::Config("methods and seeds must be non-empty".into()));
        }
        let dbos = methods.contains(&Method::Dbos);
        let bbm = methods.contains(&Method::Bbm);
        if !dbos && f.has_prefix("shaping.") {
            return Err(DbosError::Config("shaping.* keys given but dbos is not a selected method".into()));
        }
        if !bbm && f.has_prefix("bbm.") {
            return Err(DbosError::Config("bbm.* keys given but bbm is not a selected method".into()));
        }

        let mut c = TrainConfig::preset(env, methods[0]);
        c.seed = seeds[0];
        f.set("proxy", &mut c.proxy)?;
        f.set("critic_lr", &mut c.critic_lr)?;
        f.set("predictor_lr", &mut c.predictor_lr)?;
        f.set("eval_episodes", &mut c.eval_episodes)?;
        f.set("greedy_eval", &mut c.greedy_eval)?;
        let output_dir: PathBuf = f.take("output_dir")?.unwrap_or_else(|| PathBuf::from("runs"));

        let p = &mut c.ppo;
        f.set("ppo.n_envs", &mut p.n_envs)?;
        f.set("ppo.horizon", &mut p.horizon)?;
        f.set("ppo.epochs", &mut p.epochs)?;
        f.set("ppo.minibatches", &mut p.minibatches)?;
        f.set("ppo.lr", &mut p.lr)?;
        f.set("ppo.gamma", &mut p.gamma)?;
        f.set("ppo.gae_lambda", &mut p.gae_lambda)?;
        f.set("ppo.clip_eps", &mut p.clip_eps)?;
        f.set("ppo.ent_coef", &mut p.ent_coef)?;
        f.set("ppo.vf_coef", &mut p.vf_coef)?;
        f.set("ppo.max_grad_norm", &mut p.max_grad_norm)?;
        f.set("ppo.total_steps", &mut p.total_steps)?;

        let m = &mut c.model;
        f.set("model.hidden", &mut m.hidden)?;
        f.set("model.hidden_layers", &mut m.hidden_layers)?;
        f.set("model.critic_hidden", &mut m.critic_hidden)?;
        f.set("model.critic_layers", &mut m.critic_layers)?;
        f.set("model.predictor_hidden", &mut m.predictor_hidden)?;
        f.set("model.predictor_emb", &mut m.predictor_emb)?;

        let ks: Vec<usize> = f.list("shaping.k")?.unwrap_or_else(|| vec![c.shaping.k]);
        if ks.is_empty() {
            return Err(DbosError::Config("shaping.k must list at least one horizon".into()));
        }
        let s = &mut c.shaping;
        s.k = ks[0];
        f.set("shaping.lambda", &mut s.lambda)?;
        f.set("shaping.mode", &mut s.mode)?;
        f.set_opt("shaping.gate_entropy", &mut s.gate_entropy)?;
        f.set_opt("shaping.rms_target", &mut s.rms_target)?;
        f.set_opt("shaping.coef_clip", &mut s.coef_clip)?;
        f.set_opt("shaping.grad_cap", &mut s.grad_cap)?;
        f.set("shaping.role0_restrict", &mut s.role0_restrict)?;
        f.set("shaping.temperature", &mut s.stab.temperature)?;
        f.set("shaping.alpha_floor", &mut s.stab.alpha_floor)?;
        f.set("bbm.lambda", &mut c.bbm.lambda)?;

        if let Some(k) = f.map.keys().next() {
            return Err(DbosError::Config(format!("unknown key `{k}`")));
        }
        let exp = Self {
            base: c,
            methods,
            seeds,
            ks,
            output_dir,
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() || self.ks.is_empty() {
            return Err(DbosError::Config("methods, seeds and shaping horizons must be non-empty".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(DbosError::Config("seeds must be distinct".into()));
        }
        for &k in &self.ks {
            self.cell(self.methods[0], k, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    /// Flat text that parses back to an equal config.
    pub fn to_text(&self) -> String {
        let c = &self.base;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("env", c.env.name().to_string());
        kv("methods", self.methods.iter().map(Method::name).collect::<Vec<_>>().join(","));
        kv("seeds", join(&self.seeds));
        kv("proxy", c.proxy.name().to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("eval_episodes", c.eval_episodes.to_string());
        kv("greedy_eval", c.greedy_eval.to_string());
        kv("critic_lr", c.critic_lr.to_string());
        kv("predictor_lr", c.predictor_lr.to_string());
        let p = &c.ppo;
        kv("ppo.n_envs", p.n_envs.to_string());
        kv("ppo.horizon", p.horizon.to_string());
        kv("ppo.epochs", p.epochs.to_string());
        kv("ppo.minibatches", p.minibatches.to_string());
        kv("ppo.lr", p.lr.to_string());
        kv("ppo.gamma", p.gamma.to_string());
        kv("ppo.gae_lambda", p.gae_lambda.to_string());
        kv("ppo.clip_eps", p.clip_eps.to_string());
        kv("ppo.ent_coef", p.ent_coef.to_string());
        kv("ppo.vf_coef", p.vf_coef.to_string());
        kv("ppo.max_grad_norm", p.max_grad_norm.to_string());
        kv("ppo.total_steps", p.total_steps.to_string());
        let m = &c.model;
        kv("model.hidden", m.hidden.to_string());
        kv("model.hidden_layers", m.hidden_layers.to_string());
        kv("model.critic_hidden", m.critic_hidden.to_string());
        kv("model.critic_layers", m.critic_layers.to_string());
        kv("model.predictor_hidden", m.predictor_hidden.to_string());
        kv("model.predictor_emb", m.predictor_emb.to_string());
        if self.methods.contains(&Method::Dbos) {
            let s = &c.shaping;
            kv("shaping.k", join(&self.ks));
            kv("shaping.lambda", s.lambda.to_string());
            kv("shaping.mode", s.mode.name().to_string());
            kv("shaping.gate_entropy", opt_str(s.gate_entropy));
            kv("shaping.rms_target", opt_str(s.rms_target));
            kv("shaping.coef_clip", opt_str(s.coef_clip));
            kv("shaping.grad_cap", opt_str(s.grad_cap));
            kv("shaping.role0_restrict", s.role0_restrict.to_string());
            kv("shaping.temperature", s.stab.temperature.to_string());
            kv("shaping.alpha_floor", s.stab.alpha_floor.to_string());
        }
        if self.methods.contains(&Method::Bbm) {
            kv("bbm.lambda", c.bbm.lambda.to_string());
        }
        out
    }

    /// Training config of one sweep cell.
    pub fn cell(&self, method: Method, k: usize, seed: u64) -> TrainConfig {
        let mut c = self.base.clone();
        c.method = method;
        c.seed = seed;
        c.shaping.k = k;
        c
    }

    /// Every (method, k, seed) cell. Methods without shaping run once per
    /// seed regardless of how many horizons are listed.
    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &m in &self.methods {
            let ks: &[usize] = if m == Method::Dbos { &self.ks } else { &self.ks[..1] };
            for &k in ks {
                for &s in &self.seeds {
                    out.push(self.cell(m, k, s));
                }
            }
        }
        out
    }

    /// Config describing just one run, as stored in its run directory.
    pub fn single(cfg: &TrainConfig, output_dir: &Path) -> Self {
        Self {
            base: cfg.clone(),
            methods: vec![cfg.method],
            seeds: vec![cfg.seed],
            ks: vec![cfg.shaping.k],
            output_dir: output_dir.to_path_buf(),
        }
    }

    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output_dir(&self.output_dir)
    }
}

/// Joins a relative path onto the output root from the environment, if any.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Row label in result tables.
pub fn method_label(method: Method, k: Option<usize>, proxy: ProxyMode) -> String {
    match method {
        Method::Ppo => "PPO (No shaping)".to_string(),
        Method::Bbm => "BBM".to_string(),
        Method::Dbos => {
            let mut s = format!("D-BOS, k={}", k.unwrap_or(0));
            if proxy == ProxyMode::Estimated {
                s.push_str(" (Est.)");
            }
            s
        }
    }
}

pub fn run_dir_name(cfg: &TrainConfig) -> String {
    let mut s = format!("{}_{}", cfg.env.name(), cfg.method.name());
    if cfg.method == Method::Dbos {
        let _ = write!(s, "_k{}", cfg.shaping.k);
    }
    if cfg.proxy == ProxyMode::Estimated {
        s.push_str("_est");
    }
    let _ = write!(s, "_s{}", cfg.seed);
    s
}

/// One CSV row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub env: String,
    pub proxy: String,
    /// Shaping horizon, empty for methods without shaping.
    pub k: Option<usize>,
    pub seed: u64,
    pub win_rate: Option<f64>,
    pub win_se: Option<f64>,
    pub mean_return: Option<f64>,
    pub return_se: Option<f64>,
    pub eval_episodes: usize,
    pub env_steps: u64,
    pub step_budget: u64,
    pub wall_secs: f64,
    /// `ok` or `failed`.
    pub status: String,
    pub error: String,
}

impl RunSummary {
    fn blank(cfg: &TrainConfig) -> Self {
        Self {
            method: cfg.method,
            env: cfg.env.name().to_string(),
            proxy: cfg.proxy.name().to_string(),
            k: (cfg.method == Method::Dbos).then_some(cfg.shaping.k),
            seed: cfg.seed,
            win_rate: None,
            win_se: None,
            mean_return: None,
            return_se: None,
            eval_episodes: cfg.eval_episodes,
            env_steps: 0,
            step_budget: cfg.ppo.total_steps,
            wall_secs: 0.0,
            status: "failed".to_string(),
            error: String::new(),
        }
    }

    pub fn failed(cfg: &TrainConfig, err: &DbosError, wall_secs: f64) -> Self {
        Self {
            error: err.to_string(),
            wall_secs,
            ..Self::blank(cfg)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Headline metric: win rate where the game has winners, else return.
    pub fn score(&self) -> Option<f64> {
        self.win_rate.or(self.mean_return)
    }

    pub fn label(&self) -> String {
        let proxy = self.proxy.parse().unwrap_or(ProxyMode::Canonical);
        method_label(self.method, self.k, proxy)
    }
}

pub fn write_summaries(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_summaries(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries(path: &Path) -> Result<Vec<RunSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(DbosError::from)).collect()
}

/// Trains one cell into `dir`, then evaluates the final policy in self-play
/// with every seat on the trained parameters.
///
/// The directory receives the resolved config, per-iteration metrics, the
/// final checkpoint and a one-row summary.
pub fn run_cell(cfg: &TrainConfig, dir: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), ExperimentConfig::single(cfg, dir).to_text())?;
    let mut trainer = Trainer::new(cfg.clone())?;
    {
        let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        trainer.run(Some(&mut metrics))?;
    }
    trainer.save_policy(&dir.join(CHECKPOINT_FILE))?;
    let th = trainer.theta().as_slice();
    let eval = evaluate(
        trainer.policy(),
        th,
        th,
        cfg.env,
        cfg.eval_episodes,
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        cfg.greedy_eval,
    )?;
    let summary = RunSummary {
        win_rate: eval.win_rate,
        win_se: eval.win_se,
        mean_return: Some(eval.mean_return),
        return_se: Some(eval.return_se),
        env_steps: trainer.env_steps(),
        wall_secs: start.elapsed().as_secs_f64(),
        status: "ok".to_string(),
        ..RunSummary::blank(cfg)
    };
    write_summaries(&dir.join(SUMMARY_FILE), std::slice::from_ref(&summary))?;
    Ok(summary)
}

/// Runs every cell in order. A failing cell is recorded as a `failed` row
/// and the sweep moves on. Rows are appended to `summary.csv` under the
/// output directory as they finish.
pub fn run_sweep(exp: &ExperimentConfig, mut on_done: impl FnMut(&RunSummary)) -> Result<Vec<RunSummary>> {
    exp.validate()?;
    let root = exp.resolved_output_dir();
    fs::create_dir_all(&root)?;
    let sweep_csv = root.join(SUMMARY_FILE);
    let mut out = Vec::new();
    for cfg in exp.cells() {
        let start = Instant::now();
        let row = run_cell(&cfg, &root.join(run_dir_name(&cfg)))
            .unwrap_or_else(|e| RunSummary::failed(&cfg, &e, start.elapsed().as_secs_f64()));
        append_summaries(&sweep_csv, std::slice::from_ref(&row))?;
        on_done(&row);
        out.push(row);
    }
    Ok(out)
}

/// Checks that a run directory holds everything a finished run writes.
pub fn audit_run_dir(dir: &Path) -> Result<RunSummary> {
    let missing = |name: &str| DbosError::Data(format!("{} is missing {name}", dir.display()));
    for name in [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, SUMMARY_FILE] {
        if !dir.join(name).is_file() {
            return Err(missing(name));
        }
    }
    ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let mut lines = 0usize;
    for line in BufReader::new(File::open(dir.join(METRICS_FILE))?).lines() {
        serde_json::from_str::<serde_json::Value>(&line?)?;
        lines += 1;
    }
    if lines == 0 {
        return Err(DbosError::Data(format!("{} has no metrics lines", dir.display())));
    }
    load_policy_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let rows = read_summaries(&dir.join(SUMMARY_FILE))?;
    match <[RunSummary; 1]>::try_from(rows) {
        Ok([row]) => Ok(row),
        Err(rows) => Err(DbosError::Data(format!(
            "{} summary has {} rows, expected 1",
            dir.display(),
            rows.len()
        ))),
    }
}

/// Seed-level results of one table row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub env: String,
    pub label: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation across seeds over `sqrt(n_seeds)`.
    pub se: f64,
}

impl AggregateRow {
    /// `Label & mean ± se`.
    pub fn table_line(&self) -> String {
        format!("{} & {:.3} ± {:.3}", self.label, self.mean, self.se)
    }
}

/// Groups successful runs by (env, row label) in first-seen order.
pub fn aggregate(rows: &[RunSummary]) -> Vec<AggregateRow> {
    let mut out: Vec<AggregateRow> = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let Some(score) = r.score() else { continue };
        let label = r.label();
        match out.iter_mut().find(|a| a.env == r.env && a.label == label) {
            Some(a) => a.per_seed.push((r.seed, score)),
            None => out.push(AggregateRow {
                env: r.env.clone(),
                label,
                per_seed: vec![(r.seed, score)],
                mean: 0.0,
                se: 0.0,
            }),
        }
    }
    for a in &mut out {
        a.per_seed.sort_by_key(|p| p.0);
        let xs: Vec<f64> = a.per_seed.iter().map(|p| p.1).collect();
        (a.mean, a.se) = mean_se(&xs);
    }
    out
}

/// One `Label & mean ± se` line per row.
pub fn format_table(rows: &[AggregateRow]) -> String {
    rows.iter().map(|r| r.table_line() + "\n").collect()
}

/// Per-seed breakdown with an aggregate column; missing cells print `-`.
pub fn format_per_seed_table(rows: &[AggregateRow]) -> String {
    let seeds: BTreeSet<u64> = rows.iter().flat_map(|r| r.per_seed.iter().map(|p| p.0)).collect();
    let mut out = String::from("Method");
    for s in &seeds {
        let _ = write!(out, " & Seed {s}");
    }
    out.push_str(" & Aggregate (Mean ± SE)\n");
    for r in rows {
        out.push_str(&r.label);
        for s in &seeds {
            match r.per_seed.iter().find(|p| p.0 == *s) {
                Some(p) => {
                    let _ = write!(out, " & {:.3}", p.1);
                }
                None => out.push_str(" & -"),
            }
        }
        let _ = writeln!(out, " & {:.3} ± {:.3}", r.mean, r.se);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedComparison {
    pub env: String,
    pub label: String,
    /// `method - baseline` per seed.
    pub deltas: Vec<(u64, f64)>,
    pub mean_delta: f64,
    pub se_delta: f64,
    pub better: usize,
    pub worse: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub rows: Vec<PairedComparison>,
}

impl ComparisonReport {
    pub fn render(&self) -> String {
        let mut out = format!("baseline: {}\n", self.baseline);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{} [{}]: delta {:+.3} ± {:.3} (better {}, worse {}, tied {})",
                r.label, r.env, r.mean_delta, r.se_delta, r.better, r.worse, r.ties
            );
        }
        out
    }
}

/// Paired per-seed differences of every row against `baseline` within the
/// same environment. Every compared row must cover exactly the baseline's
/// seeds.
pub fn compare_runs(rows: &[RunSummary], baseline: Method) -> Result<ComparisonReport> {
    let agg = aggregate(rows);
    let base_label = method_label(baseline, None, ProxyMode::Canonical);
    let mut out = Vec::new();
    let envs: BTreeSet<&str> = agg.iter().map(|a| a.env.as_str()).collect();
    for env in envs {
        let in_env: Vec<&AggregateRow> = agg.iter().filter(|a| a.env == env).collect();
        let base_rows: Vec<&&AggregateRow> = in_env
            .iter()
            .filter(|a| rows.iter().any(|r| r.method == baseline && r.env == env && r.label() == a.label))
            .collect();
        let base = match base_rows.as_slice() {
            [b] => *b,
            [] => {
                return Err(DbosError::Data(format!("no `{}` runs for {env}", baseline.name())));
            }
            _ => {
                return Err(DbosError::Data(format!(
                    "several `{}` row variants for {env}; compare them separately",
                    baseline.name()
                )))
            }
        };
        for a in in_env.iter().filter(|a| a.label != base.label) {
            for seeds in [&a.per_seed, &base.per_seed] {
                let distinct: BTreeSet<u64> = seeds.iter().map(|p| p.0).collect();
                if distinct.len() != seeds.len() {
                    return Err(DbosError::Data(format!("duplicate seeds in `{}` for {env}", a.label)));
                }
            }
            let sa: Vec<u64> = a.per_seed.iter().map(|p| p.0).collect();
            let sb: Vec<u64> = base.per_seed.iter().map(|p| p.0).collect();
            if sa != sb {
                return Err(DbosError::Data(format!(
                    "seed sets differ between `{}` {sa:?} and the baseline {sb:?} in {env}",
                    a.label
                )));
            }
            let deltas: Vec<(u64, f64)> = a
                .per_seed
                .iter()
                .zip(&base.per_seed)
                .map(|(x, y)| (x.0, x.1 - y.1))
                .collect();
            let d: Vec<f64> = deltas.iter().map(|p| p.1).collect();
            let (mean_delta, se_delta) = mean_se(&d);
            out.push(PairedComparison {
                env: env.to_string(),
                label: a.label.clone(),
                better: d.iter().filter(|v| **v > 0.0).count(),
                worse: d.iter().filter(|v| **v < 0.0).count(),
                ties: d.iter().filter(|v| **v == 0.0).count(),
                deltas,
                mean_delta,
                se_delta,
            });
        }
    }
    if out.is_empty() {
        return Err(DbosError::Data("need at least one method besides the baseline".into()));
    }
    Ok(ComparisonReport {
        baseline: base_label,
        rows: out,
    })
}
