use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use subdiff_cli::{run, Command, Overrides};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sub {
    Simulate,
    Eigen,
    Estimate,
    Gof,
    Se,
}

/// Simulation, spectral estimation and goodness of fit for subordinate diffusions.
#[derive(Parser, Debug)]
#[command(name = "subdiff", version)]
struct Args {
    command: Sub,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 runs sequentially).
    #[arg(long)]
    threads: Option<usize>,
    /// Omit the timestamp so reruns give byte-identical reports.
    #[arg(long)]
    deterministic: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cmd = match args.command {
        Sub::Simulate => Command::Simulate,
        Sub::Eigen => Command::Eigen,
        Sub::Estimate => Command::Estimate,
        Sub::Gof => Command::Gof,
        Sub::Se => Command::Se,
    };
    let ov = Overrides {
        seed: args.seed,
        threads: args.threads,
        deterministic: args.deterministic,
    };
    match run(cmd, &args.config, &ov) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
