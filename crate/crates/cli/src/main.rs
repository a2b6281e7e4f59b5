//! `oedkit`: configuration-driven design runs.
//!
//! Exit codes: 0 success, 1 invalid input or failed checks, 2 runtime failure.

mod commands;
mod config;
mod output;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ExperimentConfig, Overrides};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "oedkit", version, about = "Optimal sensor placement for Bayesian inverse problems")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    /// JSON experiment configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Validate and print the resolved configuration without running or writing.
    #[arg(long)]
    dry_run: bool,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sensor (or observation-time) budget.
    #[arg(long)]
    k: Option<usize>,
    /// Override a configuration key, e.g. `--set design.penalty.gamma=0.01`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FieldKind {
    PriorSample,
    PriorVariance,
    PosteriorVariance,
    Map,
    Trajectory,
}

impl FieldKind {
    pub fn file_stem(&self) -> &'static str {
        match self {
            FieldKind::PriorSample => "prior_sample",
            FieldKind::PriorVariance => "prior_variance",
            FieldKind::PosteriorVariance => "posterior_variance",
            FieldKind::Map => "map",
            FieldKind::Trajectory => "trajectory",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Penalized weight optimization on a linear problem.
    LinearOed(RunArgs),
    /// Greedy selection of `k` sensors or observation times.
    Greedy(RunArgs),
    /// Observation-time design for the SEIRD model.
    NonlinearOed(RunArgs),
    /// Adjoint, route-equivalence and identity checks.
    Verify(RunArgs),
    /// Write one field as CSV (fields on the grid, or the SEIRD trajectory).
    ExportField {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        field: FieldKind,
    },
}

impl Command {
    fn run_args(&self) -> &RunArgs {
        match self {
            Command::LinearOed(a) | Command::Greedy(a) | Command::NonlinearOed(a) | Command::Verify(a) => a,
            Command::ExportField { run, .. } => run,
        }
    }
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let overrides = Overrides {
        set: args.set.clone(),
        seed: args.seed,
        out_dir: args.out_dir.clone(),
        k: args.k,
    };
    config::load(args.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let args = cli.command.run_args();
    let cfg = resolve(args)?;
    if args.dry_run {
        if !matches!(cli.command, Command::Verify(_)) {
            commands::check(&cfg)?;
        }
        let text = serde_json::to_string_pretty(&cfg).expect("serializable config");
        let _ = writeln!(std::io::stdout(), "{text}");
        return Ok(());
    }
    let report = match &cli.command {
        Command::LinearOed(_) => commands::linear_oed(&cfg)?,
        Command::Greedy(_) => commands::greedy(&cfg)?,
        Command::NonlinearOed(_) => commands::nonlinear_oed(&cfg)?,
        Command::ExportField { field, .. } => commands::export_field(&cfg, *field)?,
        Command::Verify(_) => {
            let (_, ok) = commands::verify(&cfg)?;
            if !ok {
                return Err(CliError::Validation("some checks failed".into()));
            }
            return Ok(());
        }
    };
    log::info!("wrote {}", cfg.out_dir.display());
    let artifacts = report["artifacts"].as_array().cloned().unwrap_or_default();
    for a in artifacts {
        if let Some(name) = a.as_str() {
            println!("{}", cfg.out_dir.join(name).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oedkit: {e}");
            ExitCode::from(e.code())
        }
    }
}
