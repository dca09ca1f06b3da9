mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] hybrid_lq::Error),
}

impl CliError {
    /// 2 validation or usage, 3 numerical, 4 I/O.
    fn exit_code(&self) -> u8 {
        use hybrid_lq::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(E::Io(_) | E::Csv(_)) => 4,
            CliError::Core(E::Json(j)) if j.is_io() => 4,
            CliError::Core(E::Validation(_) | E::Precondition(_) | E::InvalidArgument(_) | E::Json(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hybrid-lq", version, about = "Optimal liquidation with market-maker inventory impact")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory; overrides the config and HYBRID_LQ_OUTPUT_DIR.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the Riccati system and report the value at the initial state.
    Solve(Common),
    /// Monte Carlo of the configured strategies on common noise.
    Simulate(Common),
    /// Simulation plus distribution summaries, plots and the dominance table.
    Compare(Common),
    /// Expected price impact of a block schedule and its exponential fit.
    Impact(Common),
    /// Jump-process inventory against its diffusion limit for several h.
    Hydro(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Solve(c) => commands::solve(c),
        Command::Simulate(c) => commands::simulate(c, false),
        Command::Compare(c) => commands::simulate(c, true),
        Command::Impact(c) => commands::impact(c),
        Command::Hydro(c) => commands::hydro(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
