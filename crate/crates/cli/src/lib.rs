//! Command-line front end for `phasetrack`.
//!
//! [`run`] parses arguments, executes one command and returns the process
//! exit code: 0 on success, 2 for configuration, validation and input errors,
//! 3 for numerical failures.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const TOOL: &str = "phasetrack";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Input(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Input(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Input(m) => write!(f, "input error: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<phasetrack::Error> for CliError {
    fn from(e: phasetrack::Error) -> Self {
        match e {
            phasetrack::Error::Numerical(_) => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        self != Self::Json
    }

    pub fn json(self) -> bool {
        self != Self::Csv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Surface,
    Kappa,
    Duty,
    Flux,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Surface => "surface",
            Self::Kappa => "kappa",
            Self::Duty => "duty",
            Self::Flux => "flux",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "phasetrack", version, about = "Bayesian phase tracking simulations, sweeps and calibrations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset name, e.g. sm_fig1 or table_s1_10km.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Override a config value by dotted path, e.g. servo.kp=0.5.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured servo (single or dual band).
    Simulate,
    /// Sweep a grid of settings.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Fit a power-law diffusion model to a phase series.
    Calibrate {
        /// CSV with columns t_us, phase_rad; without it the configured noise
        /// model is sampled.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated averaging times, µs.
        #[arg(long)]
        taus: Option<String>,
    },
}

/// Grid flags; each takes a comma-separated list and replaces the config's
/// `sweep` entry.
#[derive(Debug, Default, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub taus: Option<String>,
    #[arg(long)]
    pub mus: Option<String>,
    #[arg(long)]
    pub kappas: Option<String>,
    #[arg(long)]
    pub duties: Option<String>,
    /// Seed list, or a half-open range such as 0..20.
    #[arg(long)]
    pub seeds: Option<String>,
}

pub fn parse_list(flag: &str, s: &str) -> Result<Vec<f64>, CliError> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Config(format!("--{flag}: {t:?} is not a number"))))
        .collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = |t: &str| CliError::Config(format!("--seeds: {t:?} is not a seed"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad(a))?;
        let b: u64 = b.trim().parse().map_err(|_| bad(b))?;
        return Ok((a..b).collect());
    }
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad(t))).collect()
}

/// Runs the command line `args` (including the program name) and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("phasetrack: {e}");
            e.exit_code()
        }
    }
}

/// Executes a parsed command and returns the artifact paths written.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = cli.common.jobs {
            if j == 0 {
                return Err(CliError::Config("--jobs must be ≥ 1".into()));
            }
            b = b.num_threads(j);
        }
        b.build().map_err(|e| CliError::Config(format!("--jobs: {e}")))?
    };
    pool.install(|| commands::dispatch(cli))
}
