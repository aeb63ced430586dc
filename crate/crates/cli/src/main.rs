//! `rbsde-lab`: batch front end for the solvers, verifiers and oracles.
//!
//! Exit codes: 0 ok, 1 other failure, 2 no convergence, 3 invalid input,
//! 4 failed estimate or ratio check, 5 enumeration too large.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rbsde_core::estimates::DEFAULT_SLACK_FACTOR;
use rbsde_core::oracle::DEFAULT_ORACLE_CAP;
use rbsde_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rbsde-lab", version, about = "Reflected BSDE solvers on finite filtration trees")]
pub struct Cli {
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for `solve`, output file for the other commands.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for random models and Lipschitz sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long = "slack-factor", global = true, default_value_t = DEFAULT_SLACK_FACTOR)]
    pub slack_factor: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve a scenario; writes solution.json and solution.csv under --out.
    Solve,
    /// Run the estimate checks on a solved scenario.
    Verify {
        /// Solution JSON from `solve`; solved afresh when omitted.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Compare the DP value with brute-force enumeration.
    OracleCompare {
        /// Largest number of stopping rules (or rule pairs) to enumerate.
        #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
        cap: u128,
    },
    /// Print the Picard difference table and contraction ratios.
    Convergence,
    /// Emit the model of a scenario (or a bare model config) as JSON.
    BuildModel,
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Invalid(String),
    Failed(String),
    Io(String),
    Other(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::NotConverged(_) | Error::IjNotConverged(_) => 2,
                Error::TooLarge { .. } => 5,
                Error::MonotonicityViolation { .. } => 1,
                _ => 3,
            },
            CliError::Invalid(_) => 3,
            CliError::Failed(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Invalid(m) | CliError::Failed(m) | CliError::Io(m) | CliError::Other(m) => f.write_str(m),
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RBSDE_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Invalid(format!("RBSDE_LAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(Error::NotConverged(diag)) = &e {
                if let Ok(text) = serde_json::to_string(diag) {
                    eprintln!("diagnostics: {text}");
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
