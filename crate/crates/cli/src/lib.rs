//! Command-line driver: configuration resolution, mode dispatch and plot
//! data export.

pub mod commands;
pub mod config;
pub mod export;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use config::{ConfigError, Mode, Preset};

pub const THREADS_ENV: &str = "QUADLEAGUE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    TrainLeague,
    TrainIndependent,
    TrainSingle,
    SelfEval,
    Tournament,
    ValueSweep,
    DownwashDemo,
    ExportPlotData,
}

impl Command {
    fn mode(self) -> Option<Mode> {
        Some(match self {
            Command::TrainLeague => Mode::TrainLeague,
            Command::TrainIndependent => Mode::TrainIndependent,
            Command::TrainSingle => Mode::TrainSingle,
            Command::SelfEval => Mode::SelfEval,
            Command::Tournament => Mode::Tournament,
            Command::ValueSweep => Mode::ValueSweep,
            Command::DownwashDemo => Mode::DownwashDemo,
            Command::ExportPlotData => return None,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "quadleague", version, about = "Multi-agent quadrotor racing: training, evaluation and plot export")]
pub struct Cli {
    pub command: Command,
    /// TOML config file; its `mode` and `preset` keys are optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. `train.ppo.gamma=0.99`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub track: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Tournament pool member or league roster entry. Repeatable.
    #[arg(long)]
    pub pool: Vec<PathBuf>,
    #[arg(long)]
    pub roster: Vec<PathBuf>,
    /// Single agent count for self-evaluation.
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub races: Option<usize>,
    /// Results directory for export-plot-data.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Figure series for export-plot-data.
    #[arg(long)]
    pub figure: Option<String>,
}

fn toml_str(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

impl Cli {
    /// Flag values rewritten as overrides, applied after `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut out = self.sets.clone();
        if let Some(p) = &self.output {
            out.push(format!("paths.output_dir={}", toml_str(p)));
        }
        if let Some(p) = &self.track {
            out.push(format!("paths.track={}", toml_str(p)));
        }
        if let Some(p) = &self.policy {
            out.push(format!("paths.policy={}", toml_str(p)));
        }
        let list = |ps: &[PathBuf]| format!("[{}]", ps.iter().map(|p| toml_str(p)).collect::<Vec<_>>().join(", "));
        if !self.pool.is_empty() {
            out.push(format!("paths.pool={}", list(&self.pool)));
        }
        if !self.roster.is_empty() {
            out.push(format!("paths.roster={}", list(&self.roster)));
        }
        if let Some(n) = self.agents {
            out.push(format!("eval.agents=[{n}]"));
        }
        if let Some(n) = self.races {
            out.push(format!("eval.protocol.races={n}"));
        }
        out
    }
}

fn set_threads() -> Result<(), ConfigError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::new(THREADS_ENV, "must be a positive integer"))?;
    // A second call in one process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref(), Some(quadleague::Error::Config { .. }))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(e) = set_threads() {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    let Some(mode) = cli.command.mode() else {
        return export(&cli);
    };
    let file = match cli.config.as_ref().map(std::fs::read_to_string).transpose() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: reading config: {e}");
            return EXIT_CONFIG;
        }
    };
    let cfg = match config::resolve(file.as_deref(), Some(mode), cli.preset, cli.seed, &cli.flag_overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match commands::run(&cfg) {
        Ok(table) => {
            print!("{table}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn export(cli: &Cli) -> i32 {
    let (Some(results), Some(figure)) = (&cli.results, &cli.figure) else {
        eprintln!("error: export-plot-data needs --results and --figure");
        return EXIT_CONFIG;
    };
    let out = cli.output.clone().unwrap_or_else(|| results.join("plot-data"));
    match export::export_plot_data(results, figure, &out) {
        Ok(path) => {
            println!("{}", path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
