//! Building, caching and loading task streams.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cade_core::features::{ingest_protocol_stream, load_stream, save_stream, synth_task_stream, Manifest, TaskStream};
use serde_json::json;

use crate::config::{ConfigError, DataSource, ExperimentConfig};

/// Description stored in the manifest, used to tell whether a cached
/// stream matches the config.
pub fn source_description(cfg: &ExperimentConfig) -> Option<serde_json::Value> {
    match cfg.source() {
        DataSource::Synthetic { generator, seed } => Some(json!({
            "source": "synthetic",
            "generator": generator,
            "lfcc": cfg.lfcc,
            "seed": seed,
        })),
        DataSource::Ingest(i) => Some(json!({ "source": "ingest", "ingest": i, "lfcc": cfg.lfcc })),
        DataSource::Dir(_) => None,
    }
}

/// Renders or ingests the stream described by the config.
pub fn build_stream(cfg: &ExperimentConfig) -> Result<TaskStream> {
    Ok(match cfg.source() {
        DataSource::Synthetic { generator, seed } => synth_task_stream(&generator, &cfg.lfcc, seed)?,
        DataSource::Ingest(i) => ingest_protocol_stream(&i, &cfg.lfcc)?,
        DataSource::Dir(dir) => load_stream(&dir)?.0,
    })
}

/// Writes the stream to `dir`. An existing stream is only replaced with
/// `force`.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<Manifest> {
    let Some(source) = source_description(cfg) else {
        bail!(ConfigError(
            "gen-data needs `data.generator` or `data.ingest`; `data.dir` is already on disk".into()
        ));
    };
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            bail!("{} already exists; pass --force to overwrite it", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let stream = build_stream(cfg)?;
    let manifest = save_stream(dir, &stream, source).with_context(|| format!("writing {}", dir.display()))?;
    Ok(manifest)
}

/// The stream for `run`: the configured directory, a matching cached copy
/// in `cache`, or a freshly built one that is then cached.
pub fn prepare_stream(cfg: &ExperimentConfig, cache: &Path, force: bool) -> Result<TaskStream> {
    let stream = match source_description(cfg) {
        None => build_stream(cfg)?,
        Some(source) => {
            let cached = if cache.join("manifest.json").is_file() && !force {
                let (stream, manifest) = load_stream(cache).with_context(|| format!("reading {}", cache.display()))?;
                if manifest.source != source {
                    bail!(
                        "{} holds a stream built from a different data config; pass --force to rebuild it",
                        cache.display()
                    );
                }
                Some(stream)
            } else {
                None
            };
            match cached {
                Some(s) => s,
                None => {
                    gen_data(cfg, cache, true)?;
                    load_stream(cache)?.0
                }
            }
        }
    };
    let (n_coeffs, frames) = stream.input_dims().expect("validated stream");
    cfg.check_input_dims(n_coeffs, frames)?;
    Ok(stream)
}
