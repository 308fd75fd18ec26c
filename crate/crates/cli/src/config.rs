//! Experiment configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use cade_core::autodiff::OptimizerConfig;
use cade_core::continual::{BufferStrategy, MethodSpec};
use cade_core::features::{IngestConfig, LfccConfig, SynthConfig};
use cade_core::model::ModelConfig;
use cade_core::train::RunConfig;
use serde::{Deserialize, Serialize};

/// A configuration problem: bad syntax, an unknown key, an invalid value or
/// a path that does not exist.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

fn default_memory() -> Vec<usize> {
    vec![500]
}

/// One experiment: the task stream plus a method × memory × seed matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; `--out` and `CADE_OUT` take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Buffer capacities; methods without a buffer run once per seed.
    #[serde(default = "default_memory")]
    pub memory: Vec<usize>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub lfcc: LfccConfig,
    /// `model.input` must equal `[lfcc.n_coeffs, frames]` of the data.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub methods: Vec<MethodSpec>,
}

/// Where the task stream comes from. With no source given, the default
/// synthetic generator is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generator seed.
    pub seed: u64,
    /// A feature directory written by `gen-data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthConfig>,
    /// Protocol files and WAV audio.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestConfig>,
}

/// Settings shared by every cell of the matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub replay_ratio: f64,
    pub buffer_strategy: BufferStrategy,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            epochs: r.epochs,
            batch_size: r.batch_size,
            replay_ratio: r.replay_ratio,
            buffer_strategy: r.buffer_strategy,
            optimizer: r.optimizer,
        }
    }
}

/// The resolved data source.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { generator: SynthConfig, seed: u64 },
    Dir(PathBuf),
    Ingest(IngestConfig),
}

impl ExperimentConfig {
    /// Reads, parses and validates a config. Relative paths inside the file
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses TOML without validating values. Unknown keys are reported
    /// with their full path and the nearest valid key.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new(e.message().trim().to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().message().trim().to_string();
            ConfigError::new(describe(&path, &msg))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = self.data.dir.as_mut() {
            fix(d);
        }
        if let Some(i) = self.data.ingest.as_mut() {
            for p in [
                &mut i.train_protocol,
                &mut i.train_audio,
                &mut i.eval_protocol,
                &mut i.eval_audio,
            ] {
                fix(p);
            }
        }
        if let Some(o) = self.out.as_mut() {
            fix(o);
        }
    }

    pub fn source(&self) -> DataSource {
        let d = &self.data;
        if let Some(dir) = &d.dir {
            DataSource::Dir(dir.clone())
        } else if let Some(i) = &d.ingest {
            DataSource::Ingest(i.clone())
        } else {
            DataSource::Synthetic {
                generator: d.generator.clone().unwrap_or_default(),
                seed: d.seed,
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::new(m));
        if self.seeds.is_empty() {
            return bad("`seeds` must list at least one seed".into());
        }
        if self.methods.is_empty() {
            return bad("`methods` must list at least one method".into());
        }
        if has_duplicates(&self.seeds) || has_duplicates(&self.memory) {
            return bad("`seeds` and `memory` must not repeat values".into());
        }
        if self.methods.iter().any(MethodSpec::uses_buffer) && (self.memory.is_empty() || self.memory.contains(&0)) {
            return bad("`memory` must list positive capacities when a method replays".into());
        }
        let sources = [
            self.data.dir.is_some(),
            self.data.generator.is_some(),
            self.data.ingest.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return bad("set at most one of `data.dir`, `data.generator`, `data.ingest`".into());
        }
        self.lfcc
            .validate()
            .map_err(|e| ConfigError::new(format!("lfcc: {e}")))?;
        self.model
            .validate()
            .map_err(|e| ConfigError::new(format!("model: {e}")))?;
        for m in &self.methods {
            let mut run = self.run_config(m.clone(), 0, 1);
            run.memory = self.memory.first().copied().unwrap_or(1).max(1);
            run.validate().map_err(|e| ConfigError::new(format!("methods: {e}")))?;
        }
        match self.source() {
            DataSource::Synthetic { generator, .. } => {
                generator
                    .validate(self.lfcc.sample_rate)
                    .map_err(|e| ConfigError::new(format!("data: {e}")))?;
                self.check_input_dims(self.lfcc.n_coeffs, generator.frames)?;
            }
            DataSource::Dir(dir) => {
                if !dir.is_dir() {
                    return bad(format!("data.dir: {} is not a directory", dir.display()));
                }
            }
            DataSource::Ingest(i) => {
                for (key, p) in [
                    ("train_protocol", &i.train_protocol),
                    ("train_audio", &i.train_audio),
                    ("eval_protocol", &i.eval_protocol),
                    ("eval_audio", &i.eval_audio),
                ] {
                    if !p.exists() {
                        return bad(format!("data.ingest.{key}: {} does not exist", p.display()));
                    }
                }
                self.check_input_dims(self.lfcc.n_coeffs, i.frames)?;
            }
        }
        Ok(())
    }

    /// Checks that the model accepts `n_coeffs × frames` feature maps.
    pub fn check_input_dims(&self, n_coeffs: usize, frames: usize) -> Result<(), ConfigError> {
        if self.model.input != [n_coeffs, frames] {
            return Err(ConfigError::new(format!(
                "model.input is {:?} but the data has {n_coeffs} coefficients x {frames} frames; set model.input = [{n_coeffs}, {frames}]",
                self.model.input
            )));
        }
        Ok(())
    }

    /// The run configuration of one matrix cell.
    pub fn run_config(&self, method: MethodSpec, memory: usize, seed: u64) -> RunConfig {
        let t = &self.training;
        RunConfig {
            method,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer.clone(),
            memory,
            buffer_strategy: t.buffer_strategy,
            replay_ratio: t.replay_ratio,
            seed,
            model: self.model.clone(),
        }
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

/// Backtick-quoted words of a serde message, e.g. the unknown key followed
/// by the expected ones.
fn quoted(msg: &str) -> Vec<&str> {
    msg.split('`').skip(1).step_by(2).collect()
}

fn describe(path: &str, msg: &str) -> String {
    let words = quoted(msg);
    let field = msg.starts_with("unknown field");
    if (field || msg.starts_with("unknown variant")) && !words.is_empty() {
        let given = words[0];
        let nearest = words[1..]
            .iter()
            .map(|w| (strsim::normalized_damerau_levenshtein(given, w), *w))
            .filter(|(score, _)| *score >= 0.5)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        // for an unknown field the path already ends with the key itself
        let what = if field {
            format!("unknown key `{path}`")
        } else {
            format!("unknown value `{given}` at `{path}`")
        };
        return match nearest {
            Some((_, w)) => format!("{what}; did you mean `{w}`? ({msg})"),
            None => format!("{what} ({msg})"),
        };
    }
    if path.is_empty() || path == "." {
        format!("invalid config: {msg}")
    } else {
        format!("invalid config at `{path}`: {msg}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoted_words() {
        assert_eq!(
            quoted("unknown field `memroy`, expected one of `out`, `memory`"),
            ["memroy", "out", "memory"]
        );
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = ExperimentConfig::parse("seeds = [1]\nmemroy = [500]\n[[methods]]\nname = \"finetune\"\n").unwrap_err();
        let s = e.to_string();
        assert!(s.contains("`memroy`") && s.contains("did you mean `memory`"), "{s}");
    }

    #[test]
    fn nested_unknown_key_has_path() {
        let e = ExperimentConfig::parse("seeds = [1]\n[training]\nepoch = 3\n[[methods]]\nname = \"finetune\"\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("training.epoch") && e.contains("`epochs`"), "{e}");
    }

    #[test]
    fn unknown_method_suggests_nearest() {
        let e = ExperimentConfig::parse("seeds = [1]\n[[methods]]\nname = \"cadee\"\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("did you mean `cade`"), "{e}");
    }
}
