use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "pals", version, about = "Positron annihilation lifetime spectrometer toolkit")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `[run] seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads. Never changes results.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output file (a directory for `experiment`).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one lifetime histogram.
    Simulate,
    /// Fit a histogram and write a report.
    Fit {
        histogram: PathBuf,
        /// Fit specification (TOML); guessed from the histogram when absent.
        #[arg(long, value_name = "PATH")]
        fitspec: Option<PathBuf>,
    },
    /// Simulate the configured orientation against a parallel field and test.
    Experiment,
    /// Monte Carlo power of the configured test over a grid of event counts.
    Power {
        /// Expected accepted events per arm, comma separated; overrides `[run] grid`.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Overrides `[run] replicas`.
        #[arg(long)]
        replicas: Option<usize>,
    },
    /// Check the Planck-mass identity for the configured constants.
    Constants,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pals: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let ctx = commands::Context::new(cli.config, cli.seed, cli.out, cli.threads)?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Fit { histogram, fitspec } => commands::fit(&ctx, &histogram, fitspec.as_deref()),
        Command::Experiment => commands::experiment(&ctx),
        Command::Power { grid, replicas } => commands::power(&ctx, grid, replicas),
        Command::Constants => commands::constants(&ctx),
    }
}
