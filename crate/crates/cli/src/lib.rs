//! The `cade` experiment runner: data generation, the method × memory ×
//! seed matrix, and result tables.

pub mod config;
pub mod data;
pub mod matrix;
pub mod table;

use std::path::{Path, PathBuf};

pub use config::{ConfigError, ExperimentConfig};

/// Output directory: `CADE_OUT` wins over `--out`, which wins over the
/// config's `out`.
pub fn resolve_out(env: Option<&str>, flag: Option<&Path>, config: Option<&Path>) -> Result<PathBuf, ConfigError> {
    if let Some(e) = env.filter(|e| !e.is_empty()) {
        return Ok(PathBuf::from(e));
    }
    flag.or(config)
        .map(Path::to_path_buf)
        .ok_or_else(|| ConfigError("no output directory: pass --out, set CADE_OUT or `out` in the config".into()))
}
