//! Builds a task stream from protocol files and PCM16 WAV audio.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    fingerprint_of, parse_protocol, read_wav_pcm16, Cepstrogram, FeatureMap, Label, Lfcc, LfccConfig, ProtocolRecord,
    Task, TaskStream,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub train_protocol: PathBuf,
    /// Directory holding `<utt_id>.wav` for the train protocol.
    pub train_audio: PathBuf,
    pub eval_protocol: PathBuf,
    pub eval_audio: PathBuf,
    /// Attack ids per task, e.g. `[["A01", "A02"], ["A03", "A04"]]`.
    pub tasks: Vec<Vec<String>>,
    /// Feature maps are tiled or cropped to this many frames.
    pub frames: usize,
}

/// Repeats the utterance's frames cyclically or truncates to `frames`.
fn fit_frames(c: Cepstrogram, frames: usize) -> Cepstrogram {
    let row = c.n_coeffs;
    let values = (0..frames)
        .flat_map(|t| {
            let src = t % c.frames;
            c.values[src * row..(src + 1) * row].iter().copied()
        })
        .collect();
    Cepstrogram {
        frames,
        n_coeffs: row,
        values,
    }
}

fn load_split(
    records: &[ProtocolRecord],
    dir: &std::path::Path,
    cfg: &IngestConfig,
    front: &Lfcc,
) -> Result<Vec<Vec<FeatureMap>>> {
    let mut per_task = vec![Vec::new(); cfg.tasks.len()];
    let mut bona_seen = 0usize;
    for r in records {
        let task = match r.key {
            // bona fide utterances are dealt round-robin across tasks
            Label::Bonafide => {
                bona_seen += 1;
                Some((bona_seen - 1) % cfg.tasks.len())
            }
            Label::Spoof => cfg.tasks.iter().position(|t| t.contains(&r.attack_id)),
        };
        let Some(task) = task else { continue };
        let path = dir.join(format!("{}.wav", r.utt_id));
        let wave = read_wav_pcm16(
            &fs::read(&path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?,
        )?;
        let c = fit_frames(front.extract(&wave)?, cfg.frames);
        per_task[task].push(FeatureMap::new(c, r.key, task as u32 + 1)?);
    }
    Ok(per_task)
}

pub fn ingest_protocol_stream(cfg: &IngestConfig, lfcc: &LfccConfig) -> Result<TaskStream> {
    if cfg.tasks.is_empty() || cfg.tasks.iter().any(|t| t.is_empty()) || cfg.frames == 0 {
        return Err(Error::Config(
            "ingest: need non-empty task attack lists and frames > 0".into(),
        ));
    }
    let front = Lfcc::new(lfcc)?;
    let train_records = parse_protocol(&fs::read_to_string(&cfg.train_protocol)?)?;
    let eval_records = parse_protocol(&fs::read_to_string(&cfg.eval_protocol)?)?;
    let train = load_split(&train_records, &cfg.train_audio, cfg, &front)?;
    let eval = load_split(&eval_records, &cfg.eval_audio, cfg, &front)?;
    let tasks = train
        .into_iter()
        .zip(eval)
        .enumerate()
        .map(|(i, (train, eval))| Task {
            id: i as u32 + 1,
            name: cfg.tasks[i].join("+"),
            train,
            eval,
        })
        .collect();
    let stream = TaskStream {
        tasks,
        fingerprint: fingerprint_of(&serde_json::json!({
            "source": "protocol",
            "config": cfg,
            "lfcc": lfcc,
            "train": train_records.iter().map(|r| &r.utt_id).collect::<Vec<_>>(),
            "eval": eval_records.iter().map(|r| &r.utt_id).collect::<Vec<_>>(),
        })),
    };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{quantize_pcm16, write_wav_pcm16};

    #[test]
    fn ingests_small_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let lfcc = LfccConfig::default();
        let mut protocol = String::new();
        for (i, (attack, key)) in [("-", "bonafide"), ("A01", "spoof"), ("-", "bonafide"), ("A02", "spoof")]
            .iter()
            .enumerate()
        {
            protocol.push_str(&format!("SPK U{i} - {attack} {key}\n"));
            let samples: Vec<f64> = (0..3000).map(|n| 0.1 * ((n * (i + 1)) as f64 * 0.01).sin()).collect();
            fs::write(
                dir.path().join(format!("U{i}.wav")),
                write_wav_pcm16(&quantize_pcm16(&samples), 16000),
            )
            .unwrap();
        }
        fs::write(dir.path().join("proto.txt"), &protocol).unwrap();
        let cfg = IngestConfig {
            train_protocol: dir.path().join("proto.txt"),
            train_audio: dir.path().to_path_buf(),
            eval_protocol: dir.path().join("proto.txt"),
            eval_audio: dir.path().to_path_buf(),
            tasks: vec![vec!["A01".into()], vec!["A02".into()]],
            frames: 16,
        };
        let s = ingest_protocol_stream(&cfg, &lfcc).unwrap();
        assert_eq!(s.tasks.len(), 2);
        assert_eq!(s.tasks[0].train.len(), 2);
        assert!(s.tasks.iter().all(|t| t.train.iter().all(|m| m.frames == 16)));
        assert_eq!(s.setting_name(), "A01 TO A02");
    }
}
