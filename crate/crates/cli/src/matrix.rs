//! Executes the method × memory × seed matrix.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use cade_core::continual::MethodSpec;
use cade_core::features::TaskStream;
use cade_core::model::save_checkpoint;
use cade_core::train::{train_and_report, NoObserver, RunReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const RESULTS: &str = "results.jsonl";
pub const FAILURES: &str = "failures.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";

/// One run of the matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: MethodSpec,
    /// 0 for methods without a buffer.
    pub memory: usize,
    pub seed: u64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} memory={} seed={}", self.method.id(), self.memory, self.seed)
    }
}

/// A failed cell, appended to `failures.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub config_hash: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct MatrixSummary {
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failures: Vec<CellFailure>,
}

/// Cells in table order. Methods without a buffer get one cell per seed.
pub fn cells(cfg: &ExperimentConfig, seed_offset: u64) -> Vec<Cell> {
    let mut out = Vec::new();
    for m in &cfg.methods {
        let memories: Vec<usize> = if m.uses_buffer() { cfg.memory.clone() } else { vec![0] };
        for &memory in &memories {
            for &s in &cfg.seeds {
                let cell = Cell {
                    method: m.clone(),
                    memory,
                    seed: s + seed_offset,
                };
                if !out.contains(&cell) {
                    out.push(cell);
                }
            }
        }
    }
    out
}

/// Reads every record of a results file; a missing file yields none.
pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = RunReport::from_json_line(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(r);
    }
    Ok(out)
}

fn sort_key(r: &RunReport) -> (usize, String, usize, u64) {
    let spec = serde_json::to_string(&r.config.method).expect("serializable");
    (r.config.method.table_rank(), spec, r.memory, r.seed)
}

fn write_sorted(path: &Path, mut reports: Vec<RunReport>) -> Result<()> {
    reports.sort_by_key(sort_key);
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = File::create(&tmp)?;
    for r in &reports {
        writeln!(f, "{}", r.to_json_line())?;
    }
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs every cell not yet present in `out/results.jsonl` (all of them with
/// `force`) on a pool of `jobs` threads. A failing cell is recorded in
/// `out/failures.jsonl` and does not stop the others.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    out: &Path,
    jobs: usize,
    seed_offset: u64,
    force: bool,
) -> Result<MatrixSummary> {
    fs::create_dir_all(out.join(CHECKPOINTS))?;
    let results_path = out.join(RESULTS);
    let failures_path = out.join(FAILURES);
    if force {
        for p in [&results_path, &failures_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    let existing = read_reports(&results_path)?;
    let done: BTreeSet<&str> = existing.iter().map(|r| r.config_hash.as_str()).collect();
    let all = cells(cfg, seed_offset);
    let todo: Vec<(Cell, String)> = all
        .iter()
        .map(|c| {
            let hash = cfg
                .run_config(c.method.clone(), c.memory, c.seed)
                .hash(&stream.fingerprint);
            (c.clone(), hash)
        })
        .filter(|(_, h)| !done.contains(h.as_str()))
        .collect();
    let mut summary = MatrixSummary {
        total: all.len(),
        skipped: all.len() - todo.len(),
        ..Default::default()
    };
    let results = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&results_path)
            .with_context(|| format!("opening {}", results_path.display()))?,
    );
    let failures = Mutex::new(Vec::new());
    let finished = Mutex::new(0usize);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let checkpoints = out.join(CHECKPOINTS);
    pool.install(|| {
        todo.par_iter().for_each(|(cell, hash)| {
            let start = Instant::now();
            let outcome = run_cell(cfg, stream, cell, &checkpoints, &results);
            let mut n = finished.lock().expect("counter lock");
            *n += 1;
            match outcome {
                Ok(r) => eprintln!(
                    "[{}/{}] {cell}: final EER {:.3}% ({:.1} s)",
                    *n,
                    todo.len(),
                    100.0 * r.final_eer,
                    start.elapsed().as_secs_f64()
                ),
                Err(e) => {
                    eprintln!("[{}/{}] {cell}: FAILED: {e:#}", *n, todo.len());
                    failures.lock().expect("failure lock").push(CellFailure {
                        cell: cell.clone(),
                        config_hash: hash.clone(),
                        error: format!("{e:#}"),
                    });
                }
            }
        })
    });
    drop(results);
    summary.failures = failures.into_inner().expect("failure lock");
    summary.executed = todo.len() - summary.failures.len();
    if !summary.failures.is_empty() {
        let mut f = OpenOptions::new().create(true).append(true).open(&failures_path)?;
        for fl in &summary.failures {
            writeln!(f, "{}", serde_json::to_string(fl)?)?;
        }
    }
    // completion order depends on scheduling; the file does not
    write_sorted(&results_path, read_reports(&results_path)?)?;
    Ok(summary)
}

fn run_cell(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    cell: &Cell,
    checkpoints: &Path,
    results: &Mutex<File>,
) -> Result<RunReport> {
    let run = cfg.run_config(cell.method.clone(), cell.memory, cell.seed);
    let (report, model) = train_and_report(&run, stream, &mut NoObserver)?;
    save_checkpoint(&model, &checkpoint_path(checkpoints, &report.config_hash))?;
    let mut f = results.lock().expect("results lock");
    writeln!(f, "{}", report.to_json_line())?;
    f.flush()?;
    Ok(report)
}

pub fn checkpoint_path(dir: &Path, config_hash: &str) -> PathBuf {
    dir.join(format!("{config_hash}.ckpt"))
}
