//! Command implementations behind the `vmoba` binary. Each `cmd_*` function
//! loads nothing itself: it takes a validated [`RunConfig`] and an output
//! directory, writes its artifacts there and returns the in-memory report.

pub mod analyze;
pub mod bench;
pub mod config;
pub mod error;
pub mod train;
pub mod verify;

use std::fs;
use std::path::Path;

use serde::Serialize;

pub use config::RunConfig;
pub use error::{CliError, Result};

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    write(dir, name, &text)
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes `verify.json`.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<verify::VerifyReport> {
    let report = verify::run_verify(cfg)?;
    prepare(out)?;
    write_json(out, "verify.json", &report)?;
    Ok(report)
}

/// Writes `bench.csv` and `bench.json`.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<bench::BenchReport> {
    let report = bench::run_bench(cfg)?;
    prepare(out)?;
    write(out, "bench.csv", &report.to_csv(&cfg.bench.lengths))?;
    write_json(out, "bench.json", &report)?;
    Ok(report)
}

/// Writes `analyze.json`, `block_map.csv`, `importance.csv` and one
/// `concentration_head<h>.csv` per head.
pub fn cmd_analyze(cfg: &RunConfig, out: &Path) -> Result<analyze::AnalyzeReport> {
    let report = analyze::run_analyze(cfg)?;
    prepare(out)?;
    for (name, text) in analyze::report_files(&report) {
        write(out, &name, &text)?;
    }
    write_json(out, "analyze.json", &report)?;
    Ok(report)
}

/// Writes `trace_<mode>.csv`, `validation_<mode>.csv`, `layer_schemes.csv`,
/// `train_summary.json` and, when every run finished, `comparison.json` and
/// `comparison.csv`. Partial traces are written for diverged runs.
pub fn cmd_train_toy(cfg: &RunConfig, out: &Path) -> Result<train::TrainOutcome> {
    let outcome = train::run_train(cfg)?;
    prepare(out)?;
    for t in &outcome.traces {
        let label = t.mode.label();
        write(out, &format!("trace_{label}.csv"), &t.train_csv())?;
        write(out, &format!("validation_{label}.csv"), &t.validation_csv())?;
    }
    write(out, "layer_schemes.csv", &train::scheme_log(&outcome.traces))?;
    write_json(out, "train_summary.json", &outcome.summaries)?;
    if let Some(c) = &outcome.comparison {
        write_json(out, "comparison.json", c)?;
        write(out, "comparison.csv", &c.to_csv())?;
    }
    Ok(outcome)
}
