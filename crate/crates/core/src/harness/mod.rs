//! Configuration, persistence and orchestration of the named experiments.
//!
//! A run writes into `<output root>/<experiment>-<config hash>/`:
//!
//! - `config.json`: the effective configuration
//! - `records.csv`: long-form `step,t,metric,value,seed,config_hash`
//! - `verdict.json`: status and the experiment's verdict
//! - experiment tables (`*.csv`)
//! - `metadata.json`: wall-clock and host; everything else is a function
//!   of the configuration alone
//! - checkpoints (`checkpoint-*.bin`, `final.bin`) for `dynamics`

pub mod checkpoint;
pub mod config;
pub mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::json;

pub use config::{parse_override, Experiment, RunConfig, OUTPUT_ENV};
pub use experiments::{execute, Outcome, RunContext, Status};

use crate::error::{Error, Result};
use crate::record::write_records_csv;

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub status: Status,
}

pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_root().join(format!("{}-{}", cfg.experiment, cfg.hash()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn host_name() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| fs::read_to_string("/etc/hostname").ok().map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown".into())
}

/// Runs the configured experiment on a pool of `flags.workers` threads and
/// writes its artifacts. Records are flushed even when the run aborts.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &serde_json::to_value(cfg).expect("config serializes"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.flags.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.flags.workers)))?;
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut ctx = RunContext { checkpoint_dir: Some(dir.clone()), records: Vec::new() };
    let result = pool.install(|| execute(cfg, &mut ctx));

    write_records_csv(std::io::BufWriter::new(fs::File::create(dir.join("records.csv"))?), &ctx.records)?;
    write_json(
        &dir.join("metadata.json"),
        &json!({
            "started_unix": unix_seconds(started),
            "elapsed_seconds": clock.elapsed().as_secs_f64(),
            "host": host_name(),
            "workers": pool.current_num_threads(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    let head = json!({ "experiment": cfg.experiment.name(), "config_hash": cfg.hash(), "seed": cfg.seed });
    match result {
        Ok(out) => {
            for (name, contents) in &out.tables {
                fs::write(dir.join(name), contents)?;
            }
            let mut v = head;
            v["status"] = json!(out.status);
            v["verdict"] = out.verdict;
            write_json(&dir.join("verdict.json"), &v)?;
            Ok(RunSummary { dir, status: out.status })
        }
        Err(e) => {
            let mut v = head;
            v["status"] = json!("abort");
            v["error"] = json!(e.to_string());
            write_json(&dir.join("verdict.json"), &v)?;
            Err(e)
        }
    }
}
