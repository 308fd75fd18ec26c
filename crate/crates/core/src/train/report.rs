use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::continual::MethodSpec;
use crate::error::{Error, Result};
use crate::train::run::RunConfig;

/// Outcome of one run, serialized as a single JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    /// Buffer capacity; 0 when the method keeps no buffer.
    pub memory: usize,
    pub seed: u64,
    /// Row `t`: EER on each seen task's eval split after training task `t`.
    /// Joint has a single row.
    pub per_task_eer: Vec<Vec<f64>>,
    /// EER over the union of every task's eval split.
    pub final_eer: f64,
    pub config_hash: String,
    /// Fingerprint of the task stream.
    pub stream: String,
    /// Task sequence, e.g. `A1+A2 TO A3+A4 TO A5+A6`.
    pub setting: String,
    pub steps: usize,
    pub model_checksum: String,
    pub wall_ms: u64,
    pub config: RunConfig,
}

impl RunReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable report")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }

    /// Copy with the wall-clock field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

/// One table row: a method at one memory size, over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub spec: MethodSpec,
    pub memory: usize,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

/// Mean and sample standard deviation of the final EER per
/// (method, memory), in table order: Joint first, CADE last; memory sizes
/// of one method are adjacent and ascending.
pub fn aggregate(reports: &[RunReport]) -> Result<Vec<SummaryRow>> {
    let Some(first) = reports.first() else {
        return Err(Error::Invalid("no reports to aggregate".into()));
    };
    if let Some(other) = reports.iter().find(|r| r.stream != first.stream) {
        return Err(Error::Invalid(format!(
            "reports come from different task streams: {} and {}",
            first.stream, other.stream
        )));
    }
    let mut groups: BTreeMap<(usize, String, usize), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        let spec = &r.config.method;
        let key = (spec.table_rank(), serde_json::to_string(spec)?, r.memory);
        groups.entry(key).or_default().push(r);
    }
    Ok(groups
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.seed);
            let (mean, std) = mean_std(&rs.iter().map(|r| r.final_eer).collect::<Vec<_>>());
            SummaryRow {
                method: rs[0].config.method.display_name().to_string(),
                spec: rs[0].config.method.clone(),
                memory: rs[0].memory,
                seeds: rs.iter().map(|r| r.seed).collect(),
                mean,
                std,
            }
        })
        .collect())
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: MethodSpec, seed: u64, eer: f64, stream: &str) -> RunReport {
        let config = RunConfig {
            method,
            seed,
            ..Default::default()
        };
        RunReport {
            method: config.method.id().into(),
            memory: config.effective_memory(),
            seed,
            per_task_eer: vec![vec![eer]],
            final_eer: eer,
            config_hash: config.hash(stream),
            stream: stream.into(),
            setting: "A".into(),
            steps: 1,
            model_checksum: String::new(),
            wall_ms: 3,
            config,
        }
    }

    #[test]
    fn single_and_pair() {
        let rows = aggregate(&[report(MethodSpec::Finetune, 1, 0.3, "s")]).unwrap();
        assert_eq!((rows[0].mean, rows[0].std), (0.3, 0.0));
        let rows = aggregate(&[
            report(MethodSpec::Finetune, 1, 0.1, "s"),
            report(MethodSpec::Finetune, 2, 0.2, "s"),
        ])
        .unwrap();
        assert!((rows[0].mean - 0.15).abs() < 1e-15);
        assert!((rows[0].std - 0.070_710_678_118_654_75).abs() < 1e-12);
    }

    #[test]
    fn table_order_and_mixed_streams() {
        let rows = aggregate(&[
            report(MethodSpec::cade(Default::default()), 1, 0.1, "s"),
            report(MethodSpec::Joint, 1, 0.05, "s"),
            report(MethodSpec::Finetune, 1, 0.3, "s"),
        ])
        .unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["Joint", "Finetune", "CADE"]);
        let err = aggregate(&[
            report(MethodSpec::Joint, 1, 0.1, "aaa"),
            report(MethodSpec::Joint, 2, 0.1, "bbb"),
        ])
        .unwrap_err()
        .to_string();
        assert!(err.contains("aaa") && err.contains("bbb"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let r = report(MethodSpec::Replay, 4, 0.25, "s");
        assert_eq!(RunReport::from_json_line(&r.to_json_line()).unwrap(), r);
    }
}
