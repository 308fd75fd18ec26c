//! Binary feature files and the stream manifest.
//!
//! A feature file is
//!
//! ```text
//! magic   b"CADEFEAT"            8 bytes
//! version u32 LE                 currently 1
//! count   u32 LE                 number of records
//! record* frames u32 LE, n_coeffs u32 LE, label u8 (1 bona fide, 0 spoof),
//!         task_id u32 LE, then frames*n_coeffs f64 LE, row-major
//! ```
//!
//! A stream directory holds `manifest.json` plus `task{id}_train.feat` and
//! `task{id}_eval.feat` for every task.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Cepstrogram, FeatureMap, Label, Task, TaskStream};

pub const FEATURE_MAGIC: &[u8; 8] = b"CADEFEAT";
pub const FEATURE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

pub fn encode_features(maps: &[FeatureMap]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(maps.len() as u32).to_le_bytes());
    for m in maps {
        out.extend_from_slice(&(m.frames as u32).to_le_bytes());
        out.extend_from_slice(&(m.n_coeffs as u32).to_le_bytes());
        out.push(m.label.index() as u8);
        out.extend_from_slice(&m.task_id.to_le_bytes());
        for v in &m.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("feature file truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureMap>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != FEATURE_MAGIC {
        return Err(Error::Version("not a feature file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Version(format!(
            "feature file version {version}, expected {FEATURE_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let frames = r.u32()? as usize;
        let n_coeffs = r.u32()? as usize;
        let label = Label::from_index(r.take(1)?[0] as usize)?;
        let task_id = r.u32()?;
        let values = r
            .take(frames * n_coeffs * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(FeatureMap::new(
            Cepstrogram {
                frames,
                n_coeffs,
                values,
            },
            label,
            task_id,
        )?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn write_feature_file(path: &Path, maps: &[FeatureMap]) -> Result<()> {
    fs::write(path, encode_features(maps))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureMap>> {
    decode_features(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub id: u32,
    pub name: String,
    pub train_file: String,
    pub eval_file: String,
    pub train_count: usize,
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub fingerprint: String,
    /// Free-form description of the source (generator config, seed, ...).
    pub source: serde_json::Value,
    pub tasks: Vec<ManifestTask>,
}

pub fn save_stream(dir: &Path, stream: &TaskStream, source: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut tasks = Vec::new();
    for t in &stream.tasks {
        let train_file = format!("task{}_train.feat", t.id);
        let eval_file = format!("task{}_eval.feat", t.id);
        write_feature_file(&dir.join(&train_file), &t.train)?;
        write_feature_file(&dir.join(&eval_file), &t.eval)?;
        tasks.push(ManifestTask {
            id: t.id,
            name: t.name.clone(),
            train_file,
            eval_file,
            train_count: t.train.len(),
            eval_count: t.eval.len(),
        });
    }
    let manifest = Manifest {
        format_version: FEATURE_VERSION,
        fingerprint: stream.fingerprint.clone(),
        source,
        tasks,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_stream(dir: &Path) -> Result<(TaskStream, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FEATURE_VERSION {
        return Err(Error::Version(format!(
            "manifest version {}, expected {FEATURE_VERSION}",
            manifest.format_version
        )));
    }
    let mut tasks = Vec::new();
    for mt in &manifest.tasks {
        let train = read_feature_file(&dir.join(&mt.train_file))?;
        let eval = read_feature_file(&dir.join(&mt.eval_file))?;
        if train.len() != mt.train_count || eval.len() != mt.eval_count {
            return Err(Error::Format(format!(
                "task {} record counts disagree with manifest",
                mt.id
            )));
        }
        tasks.push(Task {
            id: mt.id,
            name: mt.name.clone(),
            train,
            eval,
        });
    }
    let stream = TaskStream {
        tasks,
        fingerprint: manifest.fingerprint.clone(),
    };
    stream.validate()?;
    Ok((stream, manifest))
}
