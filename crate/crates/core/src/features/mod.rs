//! Audio front-end and data sources: LFCC extraction, WAV and protocol
//! ingestion, the synthetic spoof-family generator, and feature files.

mod ingest;
mod lfcc;
mod protocol;
mod store;
mod synth;
mod wav;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use ingest::{ingest_protocol_stream, IngestConfig};
pub use lfcc::{dct_matrix, hamming, lfcc, linear_filterbank, power_spectrum, Cepstrogram, Lfcc, LfccConfig};
pub use protocol::{parse_protocol, ProtocolRecord};
pub use store::{
    decode_features, encode_features, load_stream, read_feature_file, save_stream, write_feature_file, Manifest,
    ManifestTask, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{
    synth_task_stream, AmplitudeModulation, BandNoise, BaseProcess, Nuisance, SpoofFamily, SynthConfig, TaskSpec, Tone,
};
pub use wav::{quantize_pcm16, read_wav_pcm16, write_wav_pcm16};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Invalid(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Self { samples, sample_rate })
    }
}

/// Ground truth. The class index doubles as the logit index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spoof,
    Bonafide,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Spoof => 0,
            Label::Bonafide => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Spoof),
            1 => Ok(Label::Bonafide),
            _ => Err(Error::Invalid(format!("label index {i} not in {{0, 1}}"))),
        }
    }
}

/// A labeled cepstrogram: `frames × n_coeffs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub frames: usize,
    pub n_coeffs: usize,
    pub values: Vec<f64>,
    pub label: Label,
    pub task_id: u32,
}

impl FeatureMap {
    pub fn new(c: Cepstrogram, label: Label, task_id: u32) -> Result<Self> {
        if c.values.len() != c.frames * c.n_coeffs || c.values.is_empty() {
            return Err(Error::Invalid("feature map size does not match its shape".into()));
        }
        if c.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            frames: c.frames,
            n_coeffs: c.n_coeffs,
            values: c.values,
            label,
            task_id,
        })
    }

    /// Model input layout `[1, n_coeffs, frames]` (coefficients along height).
    pub fn to_input(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.values.len());
        for k in 0..self.n_coeffs {
            for t in 0..self.frames {
                data.push(self.values[t * self.n_coeffs + k]);
            }
        }
        Tensor::new(vec![1, self.n_coeffs, self.frames], data).expect("consistent shape")
    }

    /// Per-coefficient mean over frames.
    pub fn mean_coeffs(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_coeffs];
        for row in self.values.chunks(self.n_coeffs) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }
}

/// Stacks samples into a model batch `[N, 1, n_coeffs, frames]`.
pub fn batch_input(maps: &[&FeatureMap]) -> Result<Tensor> {
    let inputs: Vec<Tensor> = maps.iter().map(|m| m.to_input()).collect();
    let refs: Vec<&Tensor> = inputs.iter().collect();
    Tensor::stack(&refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: u32,
    pub name: String,
    pub train: Vec<FeatureMap>,
    pub eval: Vec<FeatureMap>,
}

/// Ordered tasks plus a fingerprint of whatever produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub fingerprint: String,
}

impl TaskStream {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Invalid("task stream has no tasks".into()));
        }
        let shape = self.tasks[0]
            .train
            .first()
            .map(|m| (m.frames, m.n_coeffs))
            .ok_or_else(|| Error::Invalid("task with empty train split".into()))?;
        for (i, t) in self.tasks.iter().enumerate() {
            if i > 0 && t.id <= self.tasks[i - 1].id {
                return Err(Error::Invalid(format!(
                    "task ids must be unique and increasing, got {} after {}",
                    t.id,
                    self.tasks[i - 1].id
                )));
            }
            for (split, maps) in [("train", &t.train), ("eval", &t.eval)] {
                for label in [Label::Spoof, Label::Bonafide] {
                    if !maps.iter().any(|m| m.label == label) {
                        return Err(Error::Invalid(format!(
                            "task {} {split} split has no {label:?} samples",
                            t.id
                        )));
                    }
                }
                if let Some(m) = maps.iter().find(|m| (m.frames, m.n_coeffs) != shape) {
                    return Err(Error::Invalid(format!(
                        "task {} has a {}x{} feature map, expected {}x{}",
                        t.id, m.frames, m.n_coeffs, shape.0, shape.1
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(n_coeffs, frames)` of every feature map.
    pub fn input_dims(&self) -> Option<(usize, usize)> {
        self.tasks
            .first()
            .and_then(|t| t.train.first())
            .map(|m| (m.n_coeffs, m.frames))
    }

    /// Human-readable task sequence, e.g. `A1+A2 TO A3+A4 TO A5+A6`.
    pub fn setting_name(&self) -> String {
        self.tasks
            .iter()
            .map(|t| t.name.as_str())
            .collect::<Vec<_>>()
            .join(" TO ")
    }
}

/// Short content hash of a serializable description.
pub(crate) fn fingerprint_of<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}
