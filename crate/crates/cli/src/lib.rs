//! Experiment runner behind the `dbpairs` binary.

pub mod config;
pub mod tasks;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use dbpairs::pairs::Family;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::{ExperimentConfig, Task, SCHEMA_VERSION};
pub use tasks::{Status, TaskResult};

pub const REPORT_SCHEMA: &str = "dbpairs-report/1";
pub const REPORT_FILE: &str = "report.json";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAIL: i32 = 2;

/// Wall-clock timings; the only non-deterministic part of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub construction_seconds: f64,
    pub task_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub version: String,
    pub seed: u64,
    pub family: Family,
    pub config: ExperimentConfig,
    /// Pair summary, or the construction failure.
    pub pair: Value,
    pub tasks: Vec<TaskResult>,
    pub verdict: Status,
    pub timings: Timings,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Status::Error => EXIT_ERROR,
            Status::Fail => EXIT_FAIL,
            Status::Pass | Status::NotProbed => EXIT_PASS,
        }
    }
}

fn overall(results: &[TaskResult]) -> Status {
    let has = |s| results.iter().any(|r| r.verdict == s);
    if has(Status::Error) {
        Status::Error
    } else if has(Status::Fail) {
        Status::Fail
    } else {
        Status::Pass
    }
}

/// Runs every task of `cfg`, writing traces and `report.json` into `out_dir`.
pub fn run_config(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<Report> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let start = Instant::now();
    let built = tasks::build_pair(cfg);
    let construction_seconds = start.elapsed().as_secs_f64();
    let mut results = Vec::with_capacity(cfg.tasks.len());
    let mut task_seconds = Vec::with_capacity(cfg.tasks.len());
    let mut trace_counts: HashMap<Task, usize> = HashMap::new();
    let pair_summary = match &built {
        Ok(b) => json!({
            "family": b.pair.family(),
            "nodes": b.pair.grid().len(),
            "a": b.pair.grid().a(),
            "b": b.pair.grid().b(),
            "dimension": b.pair.space().dim(),
            "eigenpairs": b.pair.eig().len(),
            "restriction": b.pair.restriction(),
        }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let mut runner = built.as_ref().ok().map(|b| tasks::Runner::new(cfg, b, seed));
    for (index, &task) in cfg.tasks.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = match (&mut runner, &built) {
            (Some(r), _) => r.run(task, index),
            (None, Err(e)) if tasks::is_verdict_error(e) => tasks::construction_failure(e),
            (None, Err(e)) => tasks::Outcome {
                verdict: Status::Error,
                reason: Some(format!("pair construction failed: {e}")),
                results: json!({}),
                traces: Vec::new(),
            },
            (None, Ok(_)) => unreachable!(),
        };
        let mut files = Vec::with_capacity(outcome.traces.len());
        for csv in &outcome.traces {
            let k = trace_counts.entry(task).or_insert(0);
            let name = format!("trace_{}_{}.csv", task.name(), *k);
            *k += 1;
            std::fs::write(out_dir.join(&name), csv).with_context(|| format!("writing {name}"))?;
            files.push(name);
        }
        results.push(TaskResult {
            task,
            index,
            verdict: outcome.verdict,
            reason: outcome.reason,
            results: outcome.results,
            traces: files,
        });
        task_seconds.push(t0.elapsed().as_secs_f64());
    }
    let report = Report {
        schema: REPORT_SCHEMA.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        family: cfg.family,
        config: cfg.clone(),
        pair: pair_summary,
        verdict: overall(&results),
        tasks: results,
        timings: Timings { construction_seconds, task_seconds, total_seconds: start.elapsed().as_secs_f64() },
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out_dir.join(REPORT_FILE), text + "\n").context("writing report.json")?;
    Ok(report)
}

/// Loads `config`, applies the command-line overrides and runs it.
pub fn run(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(Report, PathBuf)> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    let out_dir = match (out, &cfg.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => PathBuf::from("."),
    };
    let report = run_config(&cfg, &out_dir, cfg.seed())?;
    Ok((report, out_dir))
}

/// Task catalog for `list-tasks --json`.
pub fn task_catalog() -> Value {
    let tasks: Vec<Value> = Task::ALL
        .iter()
        .map(|t| json!({ "name": t.name(), "summary": t.summary(), "options": t.options() }))
        .collect();
    json!({ "schema_version": SCHEMA_VERSION, "tasks": tasks })
}
