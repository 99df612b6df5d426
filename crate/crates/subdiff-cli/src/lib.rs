//! Batch front end: config parsing, CSV ingestion and the subcommands that
//! write `report.json` and the data tables next to it.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;

use std::path::Path;

use serde_json::{json, Value};

use subdiff::Execution;

pub use commands::Command;
pub use config::RunConfig;
pub use error::CliError;

/// Command line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Replaces the run seed and any simulate-block seed.
    pub seed: Option<u64>,
    /// Worker threads; `Some(1)` runs every loop sequentially.
    pub threads: Option<usize>,
    /// Leave the timestamp out of the report.
    pub deterministic: bool,
}

/// Loads the config, runs one subcommand and writes `<out>/report.json`.
/// Returns the report that was written.
pub fn run(cmd: Command, config: &Path, ov: &Overrides) -> Result<Value, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
        if let Some(sim) = cfg.data.as_mut().and_then(|d| d.simulate.as_mut()) {
            sim.seed = None;
        }
    }
    std::fs::create_dir_all(&cfg.output.dir).map_err(|e| CliError::Io {
        path: cfg.output.dir.display().to_string(),
        message: e.to_string(),
    })?;
    let exec = match ov.threads {
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    };
    let ctx = commands::Context { cfg: &cfg, exec };
    let result = with_threads(ov.threads, || commands::run(cmd, &ctx))?;

    let simulate_seed = cfg.data.as_ref().and_then(|d| d.simulate.as_ref()).map(|s| s.seed.unwrap_or(cfg.seed));
    let mut report = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "seeds": { "run": cfg.seed, "simulate": simulate_seed },
        "time_unit": cfg.time_unit,
        "model": cfg.model(),
        "result": result,
    });
    if !ov.deterministic {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        report["generated_at_unix"] = json!(now);
    }
    let path = cfg.output.dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(report)
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) if n > 1 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(_threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    f()
}
