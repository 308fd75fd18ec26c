use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cade_cli::config::ExperimentConfig;
use cade_cli::matrix::{read_reports, run_matrix, RESULTS};
use cade_cli::table::{build_sections, render_csv, render_text};
use cade_cli::{data, resolve_out, ConfigError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cade",
    version,
    about = "Continual learning experiments for spoofed-audio detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (the CADE_OUT environment variable takes precedence)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing data / rerun completed cells
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render or ingest the task stream into <out>/data
    GenData(Common),
    /// Run the method x memory x seed matrix, appending to <out>/results.jsonl
    Run {
        #[command(flatten)]
        common: Common,
        /// Worker threads (default: number of cores)
        #[arg(long)]
        jobs: Option<usize>,
        /// Added to every seed in the config
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Print the results table and write table.txt / table.csv
    Table {
        /// Results directory (defaults to --out, CADE_OUT or the config's `out`)
        dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<&Path>, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, ConfigError> {
    let env = std::env::var("CADE_OUT").ok();
    resolve_out(env.as_deref(), flag, cfg.and_then(|c| c.out.as_deref()))
}

/// `Ok(true)` when every cell succeeded.
fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let out = out_dir(c.out.as_deref(), Some(&cfg))?;
            let dir = out.join("data");
            let manifest = data::gen_data(&cfg, &dir, c.force)?;
            println!(
                "wrote {} tasks to {} (fingerprint {})",
                manifest.tasks.len(),
                dir.display(),
                manifest.fingerprint
            );
            Ok(true)
        }
        Command::Run {
            common: c,
            jobs,
            seed_offset,
        } => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let out = out_dir(c.out.as_deref(), Some(&cfg))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let stream = data::prepare_stream(&cfg, &out.join("data"), c.force)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let s = run_matrix(&cfg, &stream, &out, jobs, seed_offset, c.force)?;
            println!(
                "{} cells: {} run, {} already done, {} failed",
                s.total,
                s.executed,
                s.skipped,
                s.failures.len()
            );
            for f in &s.failures {
                eprintln!("failed: {} ({})", f.cell, f.error);
            }
            Ok(s.failures.is_empty())
        }
        Command::Table { dir, config, out } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let dir = match dir {
                Some(d) => d,
                None => out_dir(out.as_deref(), cfg.as_ref())?,
            };
            let reports = read_reports(&dir.join(RESULTS))?;
            if reports.is_empty() {
                anyhow::bail!("no results in {}", dir.join(RESULTS).display());
            }
            let sections = build_sections(&reports)?;
            let text = render_text(&sections);
            fs::write(dir.join("table.txt"), &text)?;
            fs::write(dir.join("table.csv"), render_csv(&sections))?;
            print!("{text}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
