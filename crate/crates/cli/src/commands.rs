//! Mode dispatch and on-disk artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use quadleague::dynamics::{QuadParams, QuadState, Vec3};
use quadleague::env::{CircleTask, EnvSetup, Task};
use quadleague::eval::{
    run_downwash_experiment, run_self_eval, run_tournament, value_sweep, DownwashCondition, DownwashReport,
    RaceResult, Scene, SelfEvalSummary, TournamentReport,
};
use quadleague::policy::Policy;
use quadleague::track::read_track_file;
use quadleague::training::{load_roster, single_agent_setup, write_metrics, TrainConfig, TrainMode, Trainer};

use crate::config::{ConfigError, Mode, RunConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const ERROR_FILE: &str = "error.json";
pub const LOCK_FILE: &str = ".lock";
pub const SELF_EVAL_DIR: &str = "self-eval";
pub const TOURNAMENT_DIR: &str = "tournament";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VALUE_FIELD_FILE: &str = "value_field.json";
pub const DOWNWASH_FILE: &str = "downwash.json";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("output directory {} is locked by another run", dir.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorManifest {
    pub mode: String,
    pub seed: u64,
    pub config_sha256: String,
    pub error: String,
    /// Files present in the output directory when the run failed.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TournamentSummary {
    /// Pool member names, indexed by `RaceResult::policy`.
    pub pool: Vec<String>,
    pub report: TournamentReport,
}

/// Runs the configured mode. Returns the summary table printed on success.
pub fn run(cfg: &RunConfig) -> Result<String> {
    let out = cfg.paths.output_dir.clone();
    let _lock = OutputLock::acquire(&out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let _ = fs::remove_file(out.join(ERROR_FILE));
    match dispatch(cfg) {
        Ok(table) => Ok(table),
        Err(e) => {
            let manifest = ErrorManifest {
                mode: cfg.mode.name().into(),
                seed: cfg.seed,
                config_sha256: cfg.content_hash(),
                error: format!("{e:#}"),
                artifacts: list_files(&out),
            };
            let _ = fs::write(out.join(ERROR_FILE), serde_json::to_string_pretty(&manifest)?);
            Err(e)
        }
    }
}

fn list_files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(rel) = p.strip_prefix(dir) {
                out.push(rel.display().to_string());
            }
        }
    }
    out.sort();
    out
}

fn dispatch(cfg: &RunConfig) -> Result<String> {
    match cfg.mode {
        Mode::TrainSingle => train_single(cfg),
        Mode::TrainIndependent => train_independent(cfg),
        Mode::TrainLeague => train_league(cfg),
        Mode::SelfEval => self_eval(cfg),
        Mode::Tournament => tournament(cfg),
        Mode::ValueSweep => sweep(cfg),
        Mode::DownwashDemo => downwash(cfg),
    }
}

/// The configured environment with the track file applied.
pub fn env_setup(cfg: &RunConfig) -> Result<EnvSetup> {
    let mut setup = cfg.env.clone();
    if let Some(path) = &cfg.paths.track {
        let f = File::open(path).with_context(|| format!("opening track file {}", path.display()))?;
        setup.track.gates = read_track_file(BufReader::new(f))?;
        setup.track.subset = None;
    }
    setup.validate()?;
    Ok(setup)
}

fn load_policy(path: Option<&PathBuf>, key: &str) -> Result<Policy<f32>> {
    let Some(path) = path else {
        return Err(ConfigError::new(key, "required by this mode").into());
    };
    Ok(load_roster(&[path])?.remove(0))
}

fn train(
    mode: TrainMode,
    train: TrainConfig,
    setup: EnvSetup,
    roster: Vec<Policy<f32>>,
    seed: u64,
    label: &str,
    ckpt_dir: &Path,
    metrics: Option<&Path>,
    warm_start: Option<&Path>,
) -> Result<Trainer> {
    fs::create_dir_all(ckpt_dir)?;
    let mut t = Trainer::new(mode, train, setup, roster, seed)?
        .with_label(label)
        .with_checkpoint_dir(ckpt_dir);
    if let Some(p) = warm_start {
        t = t.with_initial_policy(&load_roster(&[p])?.remove(0))?;
    }
    match metrics {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            t.run(|m| {
                write_metrics(&mut w, m)?;
                Ok(w.flush()?)
            })?;
        }
        None => t.run(|_| Ok(()))?,
    }
    for l in 0..t.learners().len() {
        let ck = t.checkpoint(l);
        ck.save(ckpt_dir.join(format!("{}-final.ckpt", ck.header.label)))?;
    }
    Ok(t)
}

fn training_table(cfg: &RunConfig) -> Result<String> {
    let path = cfg.paths.output_dir.join(METRICS_FILE);
    let last = BufReader::new(File::open(&path)?)
        .lines()
        .last()
        .transpose()?
        .context("empty metrics stream")?;
    let m: serde_json::Value = serde_json::from_str(&last)?;
    Ok(format!(
        "mode {}\niteration {}\nenv_steps {}\nmean_step_reward {:.6}\nmean_episode_progress {:.6}\ncompletion {:.4}\n",
        cfg.mode.name(),
        m["iteration"],
        m["env_steps"],
        m["mean_step_reward"].as_f64().unwrap_or(f64::NAN),
        m["mean_episode_progress"].as_f64().unwrap_or(f64::NAN),
        m["completion"].as_f64().unwrap_or(f64::NAN),
    ))
}

fn train_single(cfg: &RunConfig) -> Result<String> {
    let setup = single_agent_setup(&env_setup(cfg)?);
    let metrics = cfg.paths.output_dir.join(METRICS_FILE);
    train(
        TrainMode::Shared,
        cfg.train.clone(),
        setup,
        Vec::new(),
        cfg.seed,
        "single",
        &cfg.paths.checkpoints(),
        Some(&metrics),
        cfg.paths.warm_start.as_deref(),
    )?;
    training_table(cfg)
}

fn train_independent(cfg: &RunConfig) -> Result<String> {
    let metrics = cfg.paths.output_dir.join(METRICS_FILE);
    train(
        TrainMode::Independent,
        cfg.train.clone(),
        env_setup(cfg)?,
        Vec::new(),
        cfg.seed,
        "independent",
        &cfg.paths.checkpoints(),
        Some(&metrics),
        cfg.paths.warm_start.as_deref(),
    )?;
    training_table(cfg)
}

/// Roster from `paths.roster`, or trained from scratch and saved under
/// `<checkpoints>/roster`.
fn league_roster(cfg: &RunConfig, setup: &EnvSetup) -> Result<Vec<Policy<f32>>> {
    if !cfg.paths.roster.is_empty() {
        return Ok(load_roster(&cfg.paths.roster)?);
    }
    let dir = cfg.paths.checkpoints().join("roster");
    let mut short = cfg.train.clone();
    short.ppo.iterations = cfg.roster.iterations;
    let mut roster = Vec::new();
    for r in 0..cfg.roster.single_agent {
        let t = train(
            TrainMode::Shared,
            short.clone(),
            single_agent_setup(setup),
            Vec::new(),
            cfg.seed.wrapping_add(1000 + r as u64),
            &format!("single-{r}"),
            &dir,
            None,
            None,
        )?;
        roster.extend(t.into_policies());
    }
    for r in 0..cfg.roster.independent_runs {
        let t = train(
            TrainMode::Independent,
            short.clone(),
            setup.clone(),
            Vec::new(),
            cfg.seed.wrapping_add(2000 + r as u64),
            &format!("independent-{r}"),
            &dir,
            None,
            None,
        )?;
        roster.extend(t.into_policies());
    }
    Ok(roster)
}

fn train_league(cfg: &RunConfig) -> Result<String> {
    let setup = env_setup(cfg)?;
    let roster = league_roster(cfg, &setup)?;
    let metrics = cfg.paths.output_dir.join(METRICS_FILE);
    train(
        TrainMode::League,
        cfg.train.clone(),
        setup,
        roster,
        cfg.seed,
        "league",
        &cfg.paths.checkpoints(),
        Some(&metrics),
        cfg.paths.warm_start.as_deref(),
    )?;
    training_table(cfg)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(w.flush()?)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn self_eval(cfg: &RunConfig) -> Result<String> {
    let setup = env_setup(cfg)?;
    let policy = Arc::new(load_policy(cfg.paths.policy.as_ref(), "paths.policy")?);
    let dir = cfg.paths.output_dir.join(SELF_EVAL_DIR);
    fs::create_dir_all(&dir)?;
    let mut summaries = Vec::new();
    let mut table = String::from("agents  races  records  mean_completion  std  finished  gate  wall  opponent  timeout\n");
    for &n in &cfg.eval.agents {
        let (s, results): (SelfEvalSummary, Vec<RaceResult>) = run_self_eval(&policy, n, &setup, &cfg.eval.protocol)?;
        write_jsonl(&dir.join(format!("agents-{n}.jsonl")), &results)?;
        table.push_str(&format!(
            "{:>6}  {:>5}  {:>7}  {:>15.4}  {:>3.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}\n",
            n,
            s.races,
            s.records,
            s.mean_completion,
            s.completion_std,
            s.causes.finished,
            s.causes.gate,
            s.causes.wall,
            s.causes.opponent,
            s.causes.timeout
        ));
        summaries.push(s);
    }
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summaries)?)?;
    Ok(table)
}

fn tournament(cfg: &RunConfig) -> Result<String> {
    let setup = env_setup(cfg)?;
    if cfg.paths.pool.len() < 4 {
        return Err(ConfigError::new("paths.pool", "a tournament needs at least four policies").into());
    }
    let pool: Vec<Arc<Policy<f32>>> = load_roster(&cfg.paths.pool)?.into_iter().map(Arc::new).collect();
    let names: Vec<String> = cfg
        .paths
        .pool
        .iter()
        .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let (report, results) = run_tournament(
        &pool,
        &setup,
        cfg.eval.tournament_configs,
        cfg.eval.tournament_races,
        cfg.eval.protocol.seed,
        cfg.eval.protocol.deterministic,
    )?;
    let dir = cfg.paths.output_dir.join(TOURNAMENT_DIR);
    fs::create_dir_all(&dir)?;
    write_jsonl(&dir.join("results.jsonl"), &results)?;
    let mut table = String::from("policy  races  mean_completion  std  rank1  rank2  rank3  rank4\n");
    for m in &report.methods {
        table.push_str(&format!(
            "{}  {}  {:.4}  {:.4}  {}\n",
            names[m.policy],
            m.races,
            m.mean_completion,
            m.completion_std,
            m.rank_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("  ")
        ));
    }
    let summary = TournamentSummary { pool: names, report };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(table)
}

fn sweep(cfg: &RunConfig) -> Result<String> {
    let setup = env_setup(cfg)?;
    let policy = load_policy(cfg.paths.policy.as_ref(), "paths.policy")?;
    let track = setup.track.build()?;
    let sc = &cfg.eval.sweep;
    let params = QuadParams::default();
    let mut ego = QuadState::hover(Vec3::from(sc.ego_position), sc.ego_yaw_deg.to_radians(), &params);
    ego.velocity = Vec3::from(sc.ego_velocity);
    let scene = Scene {
        ego,
        opponents: sc
            .opponents
            .iter()
            .map(|p| QuadState::hover(Vec3::from(*p), sc.ego_yaw_deg.to_radians(), &params))
            .collect(),
        gates_passed: sc.gates_passed,
    };
    let field = value_sweep(&policy, &track, &scene, &sc.grid)?;
    fs::write(cfg.paths.output_dir.join(VALUE_FIELD_FILE), serde_json::to_string(&field)?)?;
    let (lo, hi) = field
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(format!("points {}\nmin_value {lo:.6}\nmax_value {hi:.6}\n", field.values.len()))
}

fn circle_setup(cfg: &RunConfig, wake: bool) -> Result<EnvSetup> {
    let mut s = env_setup(cfg)?;
    if !matches!(s.env.task, Task::Circle(_)) {
        s.env.task = Task::Circle(CircleTask::default());
    }
    s.env.n_agents = 2;
    s.env.episode_seconds = cfg.eval.downwash.episode_seconds;
    s.wake.enabled = wake;
    s.validate()?;
    Ok(s)
}

fn downwash_policy(cfg: &RunConfig, path: Option<&PathBuf>, wake: bool) -> Result<Policy<f32>> {
    if let Some(p) = path {
        return Ok(load_roster(&[p])?.remove(0));
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.ppo.iterations = cfg.eval.downwash.train_iterations;
    let label = if wake { "circle-wake" } else { "circle-nowake" };
    let t = train(
        TrainMode::Shared,
        train_cfg,
        circle_setup(cfg, wake)?,
        Vec::new(),
        cfg.seed.wrapping_add(u64::from(wake)),
        label,
        &cfg.paths.checkpoints(),
        None,
        None,
    )?;
    Ok(t.into_policies().remove(0))
}

fn downwash(cfg: &RunConfig) -> Result<String> {
    let with = downwash_policy(cfg, cfg.paths.downwash_with.as_ref(), true)?;
    let without = downwash_policy(cfg, cfg.paths.downwash_without.as_ref(), false)?;
    let mut conditions = vec![DownwashCondition::Solo];
    conditions.extend(cfg.eval.downwash.delays.iter().map(|&d| DownwashCondition::Delay(d)));
    let report: DownwashReport = run_downwash_experiment(
        &[("with", &with), ("without", &without)],
        &circle_setup(cfg, true)?,
        &conditions,
        cfg.eval.downwash.flights,
        cfg.seed,
    )?;
    fs::write(cfg.paths.output_dir.join(DOWNWASH_FILE), serde_json::to_string(&report)?)?;
    let mut table = String::from("variant  condition  median_final_gap  altitude_error  survival\n");
    for c in &report.conditions {
        table.push_str(&format!(
            "{}  {}  {}  {:.4}  {:.3}\n",
            c.variant,
            c.condition.label(),
            c.median_final_gap.map_or("-".into(), |g| format!("{g:.4}")),
            c.mean_altitude_error,
            c.survival
        ));
    }
    Ok(table)
}
