//! Run configuration: presets, TOML files and dotted-key overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

use quadleague::env::EnvSetup;
use quadleague::eval::{EvalProtocol, SweepGrid};
use quadleague::training::TrainConfig;

#[derive(Debug, Error)]
#[error("config error at `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl From<quadleague::Error> for ConfigError {
    fn from(e: quadleague::Error) -> Self {
        match e {
            quadleague::Error::Config { field, reason } => ConfigError::new(field, reason),
            other => ConfigError::new("", other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainLeague,
    TrainIndependent,
    TrainSingle,
    SelfEval,
    Tournament,
    ValueSweep,
    DownwashDemo,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::TrainLeague => "train-league",
            Mode::TrainIndependent => "train-independent",
            Mode::TrainSingle => "train-single",
            Mode::SelfEval => "self-eval",
            Mode::Tournament => "tournament",
            Mode::ValueSweep => "value-sweep",
            Mode::DownwashDemo => "downwash-demo",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Gate file replacing the configured circuit.
    pub track: Option<PathBuf>,
    /// Defaults to `<output_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Fixed league opponents; built by short training runs when empty.
    pub roster: Vec<PathBuf>,
    /// Initial learner parameters for training modes.
    pub warm_start: Option<PathBuf>,
    /// Policy checkpoint for self-eval and value sweeps.
    pub policy: Option<PathBuf>,
    /// Tournament pool.
    pub pool: Vec<PathBuf>,
    /// Circle-task policies trained with and without the wake model.
    pub downwash_with: Option<PathBuf>,
    pub downwash_without: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            track: None,
            checkpoint_dir: None,
            output_dir: PathBuf::from("runs/latest"),
            roster: Vec::new(),
            warm_start: None,
            policy: None,
            pool: Vec::new(),
            downwash_with: None,
            downwash_without: None,
        }
    }
}

impl Paths {
    pub fn checkpoints(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.output_dir.join("checkpoints"))
    }
}

/// How an empty league roster is populated before league training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RosterConfig {
    pub single_agent: usize,
    /// Each run contributes one policy per agent slot.
    pub independent_runs: usize,
    pub iterations: usize,
}

impl Default for RosterConfig {
    fn default() -> Self {
        Self {
            single_agent: 4,
            independent_runs: 4,
            iterations: 5500,
        }
    }
}

/// Frozen scene for the value sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    pub ego_position: [f64; 3],
    pub ego_velocity: [f64; 3],
    pub ego_yaw_deg: f64,
    pub opponents: Vec<[f64; 3]>,
    pub gates_passed: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: SweepGrid {
                x: [4.0, 12.0],
                z: [0.2, 3.0],
                nx: 50,
                nz: 30,
            },
            ego_position: [6.0, 6.45, 1.05],
            ego_velocity: [3.0, 0.0, 0.0],
            ego_yaw_deg: 0.0,
            opponents: vec![[7.5, 6.45, 1.05], [8.0, 6.45, 1.8]],
            gates_passed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownwashConfig {
    pub flights: usize,
    /// Lead delays of the upper agent, s; a solo condition is always added.
    pub delays: Vec<f64>,
    /// Training length of each circle-task policy when none is supplied.
    pub train_iterations: usize,
    pub episode_seconds: f64,
}

impl Default for DownwashConfig {
    fn default() -> Self {
        Self {
            flights: 15,
            delays: vec![0.1, 0.5],
            train_iterations: 300,
            episode_seconds: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: EvalProtocol,
    /// Agent counts for self-evaluation.
    pub agents: Vec<usize>,
    pub tournament_configs: usize,
    pub tournament_races: usize,
    pub sweep: SweepConfig,
    pub downwash: DownwashConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::default(),
            agents: (1..=8).collect(),
            tournament_configs: 1000,
            tournament_races: 64,
            sweep: SweepConfig::default(),
            downwash: DownwashConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub preset: Preset,
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub env: EnvSetup,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub roster: RosterConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(mode: Mode, preset: Preset) -> Self {
        let mut cfg = Self {
            mode,
            preset,
            seed: 0,
            paths: Paths::default(),
            env: EnvSetup::default(),
            train: TrainConfig::default(),
            roster: RosterConfig::default(),
            eval: EvalConfig::default(),
        };
        if preset == Preset::Desk {
            cfg.train.ppo.n_envs = 8;
            cfg.train.ppo.rollout_steps = 100;
            cfg.train.ppo.iterations = 300;
            cfg.roster = RosterConfig {
                single_agent: 1,
                independent_runs: 1,
                iterations: 50,
            };
            cfg.eval.tournament_configs = 20;
            cfg.eval.tournament_races = 16;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate()?;
        self.train.validate()?;
        self.eval.protocol.validate()?;
        if self.eval.agents.is_empty() || self.eval.agents.iter().any(|&n| !(1..=8).contains(&n)) {
            return Err(ConfigError::new("eval.agents", "agent counts must lie in 1..=8"));
        }
        if self.eval.tournament_configs == 0 || self.eval.tournament_races == 0 {
            return Err(ConfigError::new("eval.tournament_configs", "needs at least one configuration and race"));
        }
        if self.eval.downwash.flights == 0 {
            return Err(ConfigError::new("eval.downwash.flights", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Parses a config file on top of the preset it names, then applies
/// `key=value` overrides. Mode, preset and seed may come from the file or
/// from the arguments; arguments win.
pub fn resolve(
    file: Option<&str>,
    mode: Option<Mode>,
    preset: Option<Preset>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<RunConfig, ConfigError> {
    let user: Table = match file {
        Some(text) => text
            .parse::<Table>()
            .map_err(|e| ConfigError::new("<file>", e.to_string()))?,
        None => Table::new(),
    };
    let pick = |key: &str| -> Result<Option<Value>, ConfigError> {
        Ok(sets
            .iter()
            .rev()
            .map(|s| split_override(s))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .or_else(|| user.get(key).cloned()))
    };
    let mode = match mode {
        Some(m) => m,
        None => match pick("mode")? {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| ConfigError::new("mode", e.message()))?,
            None => return Err(ConfigError::new("mode", "no mode given")),
        },
    };
    let preset = match preset {
        Some(p) => p,
        None => match pick("preset")? {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| ConfigError::new("preset", e.message()))?,
            None => Preset::default(),
        },
    };
    let base = RunConfig::preset(mode, preset);
    let mut merged = Value::try_from(&base).map_err(|e| ConfigError::new("", e.to_string()))?;
    merge(&mut merged, Value::Table(user));
    for s in sets {
        let (key, value) = split_override(s)?;
        set_path(&mut merged, &key, value)?;
    }
    if let Value::Table(t) = &mut merged {
        t.insert("mode".into(), Value::String(mode.name().into()));
        t.insert(
            "preset".into(),
            Value::String(if preset == Preset::Desk { "desk" } else { "paper" }.into()),
        );
        if let Some(s) = seed {
            t.insert("seed".into(), Value::Integer(s as i64));
        }
    }
    let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| {
        let reason = e.message().to_string();
        let key = unknown_field(&reason).unwrap_or_default();
        ConfigError::new(key, reason)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn unknown_field(msg: &str) -> Option<String> {
    let start = msg.find("unknown field `")? + "unknown field `".len();
    let end = msg[start..].find('`')?;
    Some(msg[start..start + end].to_string())
}

fn split_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::new(s, "overrides take the form key=value"))?;
    let k = k.trim().to_string();
    let v = v.trim();
    // Bare words that are not TOML literals are taken as strings.
    let value = format!("v = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k, value))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let Value::Table(t) = cur else {
            return Err(ConfigError::new(key, "is not a table"));
        };
        if i + 1 == parts.len() {
            t.insert((*p).to_string(), value);
            return Ok(());
        }
        cur = t.entry((*p).to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    Ok(())
}
