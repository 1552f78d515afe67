//! `lqnash`: batch driver for symmetric many-player LQ games.
//!
//! Exit codes: 0 success, 2 invalid input, 3 no stabilizing branch,
//! 4 solver or output failure.

mod commands;
mod input;
mod report;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use lqnash::Error;

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    NoStabilizingBranch,
    Core(Error),
    Output(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(msg) => write!(f, "invalid input: {msg}"),
            CliError::NoStabilizingBranch => write!(f, "no stabilizing branch of the limit game"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Output(msg) => write!(f, "cannot write output: {msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::NoStabilizingBranch => 3,
            CliError::Output(_) => 4,
            CliError::Core(e) => match e {
                Error::DimensionMismatch { .. }
                | Error::NotPositiveSemidefinite { .. }
                | Error::AsymmetricCost { .. }
                | Error::InvalidCoupling(_) => 2,
                Error::NoStabilizingSolution(_) | Error::SubspaceDegenerate => 3,
                _ => 4,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Limit equilibria, first-order terms and finite-M certificates.
    Solve,
    /// Convergence table over a ladder of player counts.
    Sweep,
    /// Full, reduced and limit trajectories.
    Simulate,
    /// Branch classification, including the finite-horizon test.
    Classify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Sweep => "sweep",
            Command::Simulate => "simulate",
            Command::Classify => "classify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchChoice {
    All,
    Stable,
    Index(usize),
}

impl FromStr for BranchChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(BranchChoice::All),
            "stable" => Ok(BranchChoice::Stable),
            k => k
                .parse()
                .map(BranchChoice::Index)
                .map_err(|_| format!("expected all, stable or a branch index, got `{k}`")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lqnash", version, about = "Symmetric many-player LQ feedback Nash games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Game file (JSON).
    #[arg(long, global = true)]
    game: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// all, stable, or a branch index.
    #[arg(long, global = true, default_value = "all")]
    branch: BranchChoice,
    /// Player counts, e.g. `10,100,1000`; overrides the game file.
    #[arg(long = "M", global = true, value_delimiter = ',')]
    players: Option<Vec<usize>>,
    /// Tolerance overrides, e.g. `res=1e-8,eig=1e-6`.
    #[arg(long, global = true)]
    tol: Vec<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let game = cli.game.ok_or_else(|| CliError::Invalid("--game is required".to_string()))?;
    let out = cli.out.ok_or_else(|| CliError::Invalid("--out is required".to_string()))?;
    if let Some(ms) = &cli.players {
        input::check_players(ms)?;
    }
    let overrides = input::parse_tol_overrides(&cli.tol)?;
    let loaded = input::load(&game, &overrides)?;
    fs::create_dir_all(&out).map_err(|e| CliError::Output(e.to_string()))?;
    let cx = commands::Context::new(cli.command, loaded, cli.players, cli.branch);
    commands::run(&cx, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lqnash: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
