mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, Overrides};

#[derive(Parser, Debug)]
#[command(name = "unravel", version, about = "Master equations, quantum trajectories and decoherent histories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CommandKind {
    Evolve,
    Traj,
    Ensemble,
    Hist,
    Compare,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the master equation and print expectation values.
    Evolve(Common),
    /// Write stochastic trajectories as JSON lines.
    Traj(Common),
    /// Ensemble means with standard errors.
    Ensemble(Common),
    /// Decoherence functional table over projection histories.
    Hist(Common),
    /// Coarse-grained history probabilities against jump-record probabilities.
    Compare(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// jumps, jumps-linear, qsd, qsd-linear or ortho.
    #[arg(long)]
    engine: Option<String>,
    /// exact or split.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "UNRAVEL_WORKERS")]
    workers: Option<usize>,
}

pub enum Failure {
    Config(ConfigError),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "{e}"),
            Failure::Numeric(e) => f.write_str(e),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<unravel_core::Error> for Failure {
    fn from(e: unravel_core::Error) -> Self {
        Failure::Numeric(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numeric(format!("i/o error: {e}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Command::Evolve(c) => (CommandKind::Evolve, c),
        Command::Traj(c) => (CommandKind::Traj, c),
        Command::Ensemble(c) => (CommandKind::Ensemble, c),
        Command::Hist(c) => (CommandKind::Hist, c),
        Command::Compare(c) => (CommandKind::Compare, c),
    };
    let overrides = Overrides { seed: common.seed, engine: common.engine.clone(), backend: common.backend.clone() };
    let result = config::load(common.config.as_deref(), &overrides)
        .map_err(Failure::from)
        .and_then(|cfg| {
            let ctx = commands::Context { cfg, out: common.out.clone(), workers: common.workers };
            match kind {
                CommandKind::Evolve => commands::evolve(&ctx),
                CommandKind::Traj => commands::traj(&ctx),
                CommandKind::Ensemble => commands::ensemble(&ctx),
                CommandKind::Hist => commands::hist(&ctx),
                CommandKind::Compare => commands::compare(&ctx),
            }
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
