//! Parameter importance for the EWC and MAS baselines.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OpKind, ParameterStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::features::{batch_input, FeatureMap};
use crate::model::{Model, CLASSES};

/// Which label distribution the Fisher information is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// One label drawn from the model's own predictive distribution.
    #[default]
    Sampled,
    /// Exact expectation over the model's predictive distribution.
    Expected,
    /// The ground-truth label.
    Empirical,
}

/// Per-parameter importance and the parameter values it was measured at.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub importance: BTreeMap<String, Tensor>,
    pub anchor: BTreeMap<String, Tensor>,
}

impl ImportanceMap {
    /// Adds `next`'s importance to this one and moves the anchor to `next`'s.
    pub fn accumulate(&mut self, next: ImportanceMap) -> Result<()> {
        for (name, add) in next.importance {
            let slot = self
                .importance
                .get_mut(&name)
                .ok_or_else(|| Error::Invalid(format!("importance for unknown parameter `{name}`")))?;
            if slot.shape() != add.shape() {
                return Err(shape_err(
                    "accumulate",
                    format!("`{name}` {:?} vs {:?}", slot.shape(), add.shape()),
                ));
            }
            for (a, b) in slot.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
        self.anchor = next.anchor;
        Ok(())
    }
}

fn pick<'a, R: Rng + ?Sized>(data: &'a [FeatureMap], n: usize, rng: &mut R) -> Result<Vec<&'a FeatureMap>> {
    if data.is_empty() {
        return Err(Error::Invalid("importance estimation needs data".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("importance estimation needs n_samples > 0".into()));
    }
    if n >= data.len() {
        return Ok(data.iter().collect());
    }
    let mut idx = index::sample(rng, data.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| &data[i]).collect())
}

fn zeros_like(params: &ParameterStore) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
        .collect()
}

fn anchors(params: &ParameterStore) -> BTreeMap<String, Tensor> {
    params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Runs `f` on a fresh graph holding the model applied to one sample and
/// returns the parameter gradients of the scalar it produces.
fn sample_grads(
    m: &Model,
    sample: &FeatureMap,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(batch_input(&[sample])?);
    let fv = m.build(&mut g, x, true, None)?;
    let root = f(&mut g, fv.logits)?;
    g.backward(root)
}

fn add_scaled(acc: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, w: f64, square: bool) {
    for (name, gt) in grads {
        let slot = acc.get_mut(name).expect("same parameter set");
        for (a, v) in slot.data_mut().iter_mut().zip(gt.data()) {
            *a += w * if square { v * v } else { v.abs() };
        }
    }
}

fn divide(acc: &mut BTreeMap<String, Tensor>, n: usize) {
    for t in acc.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    }
}

/// Diagonal Fisher information: the mean over samples of the squared
/// gradient of `log p(label | x)`.
pub fn estimate_fisher<R: Rng + ?Sized>(
    m: &Model,
    data: &[FeatureMap],
    n_samples: usize,
    mode: FisherMode,
    rng: &mut R,
) -> Result<ImportanceMap> {
    let picked = pick(data, n_samples, rng)?;
    let mut acc = zeros_like(m.params());
    for s in &picked {
        let logits = m.logits(&batch_input(&[s])?)?;
        let probs = softmax(logits.data());
        let labels: Vec<(usize, f64)> = match mode {
            FisherMode::Empirical => vec![(s.label.index(), 1.0)],
            FisherMode::Sampled => {
                let u: f64 = rng.random();
                let mut c = 0;
                let mut cum = probs[0];
                while u >= cum && c + 1 < CLASSES {
                    c += 1;
                    cum += probs[c];
                }
                vec![(c, 1.0)]
            }
            FisherMode::Expected => probs.iter().copied().enumerate().collect(),
        };
        for (label, w) in labels {
            if w == 0.0 {
                continue;
            }
            let grads = sample_grads(m, s, |g, logits| {
                g.apply(OpKind::SoftmaxCrossEntropy { labels: vec![label] }, &[logits])
            })?;
            add_scaled(&mut acc, &grads, w, true);
        }
    }
    divide(&mut acc, picked.len());
    Ok(ImportanceMap {
        importance: acc,
        anchor: anchors(m.params()),
    })
}

/// Mean over samples of `|∂‖logits‖² / ∂θ|`.
pub fn mas_importance<R: Rng + ?Sized>(
    m: &Model,
    data: &[FeatureMap],
    n_samples: usize,
    rng: &mut R,
) -> Result<ImportanceMap> {
    let picked = pick(data, n_samples, rng)?;
    let mut acc = zeros_like(m.params());
    for s in &picked {
        let grads = sample_grads(m, s, |g, logits| {
            let sq = g.mul(logits, logits)?;
            g.sum(sq)
        })?;
        add_scaled(&mut acc, &grads, 1.0, false);
    }
    divide(&mut acc, picked.len());
    Ok(ImportanceMap {
        importance: acc,
        anchor: anchors(m.params()),
    })
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_shapes(params: &ParameterStore, imp: &ImportanceMap) -> Result<()> {
    for (name, p) in params.iter() {
        for (what, map) in [("importance", &imp.importance), ("anchor", &imp.anchor)] {
            let t = map
                .get(name)
                .ok_or_else(|| shape_err("quadratic_penalty", format!("no {what} for `{name}`")))?;
            if t.shape() != p.shape() {
                return Err(shape_err(
                    "quadratic_penalty",
                    format!("`{name}` is {:?}, {what} is {:?}", p.shape(), t.shape()),
                ));
            }
        }
    }
    if imp.importance.len() != params.len() || imp.anchor.len() != params.len() {
        return Err(shape_err(
            "quadratic_penalty",
            "importance covers a different parameter set",
        ));
    }
    Ok(())
}

/// Records `(λ/2) Σ F·(θ − θ*)²` with fresh leaves named like the model's
/// parameters, so [`Graph::backward`] adds its gradient to theirs.
pub fn penalty_term(g: &mut Graph, params: &ParameterStore, imp: &ImportanceMap, lambda: f64) -> Result<Var> {
    check_shapes(params, imp)?;
    let mut total: Option<Var> = None;
    for (name, value) in params.iter() {
        let p = g.param(name, value.clone());
        let a = g.constant(imp.anchor[name].clone());
        let f = g.constant(imp.importance[name].clone());
        let d = g.sub(p, a)?;
        let sq = g.mul(d, d)?;
        let w = g.mul(sq, f)?;
        let s = g.sum(w)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("model has no parameters".into()))?;
    g.scale(total, lambda / 2.0)
}

/// `(λ/2) Σ F·(θ − θ*)²`
pub fn quadratic_penalty(params: &ParameterStore, imp: &ImportanceMap, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = penalty_term(&mut g, params, imp, lambda)?;
    g.value(v).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Label;
    use crate::model::{Head, ModelConfig, TapPoint};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear() -> Model {
        let cfg = ModelConfig {
            input: [1, 2],
            blocks: vec![],
            head: Head::Flatten,
            hidden: 0,
            taps: vec![TapPoint::Embedding],
            ..Default::default()
        };
        let mut m = Model::init(&cfg, 0).unwrap();
        m.set_param(
            "out.weight",
            Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap(),
        )
        .unwrap();
        m.set_param("out.bias", Tensor::vector(vec![0.05, -0.1])).unwrap();
        m
    }

    fn sample(label: Label) -> FeatureMap {
        FeatureMap {
            frames: 2,
            n_coeffs: 1,
            values: vec![1.5, -0.7],
            label,
            task_id: 1,
        }
    }

    /// ∂(−log p_y)/∂W[i][c] = x_i (p_c − [c = y]), ∂/∂b_c = p_c − [c = y]
    fn analytic(m: &Model, x: &[f64], y: usize) -> (Vec<f64>, Vec<f64>) {
        let w = m.params().get("out.weight").unwrap().data();
        let b = m.params().get("out.bias").unwrap().data();
        let z: Vec<f64> = (0..2).map(|c| x[0] * w[c] + x[1] * w[2 + c] + b[c]).collect();
        let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
        let p = [1.0 - p1, p1];
        let r: Vec<f64> = (0..2).map(|c| p[c] - if c == y { 1.0 } else { 0.0 }).collect();
        let gw = vec![x[0] * r[0], x[0] * r[1], x[1] * r[0], x[1] * r[1]];
        (gw, r)
    }

    #[test]
    fn empirical_fisher_matches_logistic_gradient() {
        let m = linear();
        let s = sample(Label::Bonafide);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = estimate_fisher(&m, std::slice::from_ref(&s), 1, FisherMode::Empirical, &mut rng).unwrap();
        let (gw, gb) = analytic(&m, &[1.5, -0.7], 1);
        for (a, e) in f.importance["out.weight"].data().iter().zip(&gw) {
            assert!((a - e * e).abs() < 1e-10);
        }
        for (a, e) in f.importance["out.bias"].data().iter().zip(&gb) {
            assert!((a - e * e).abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_fisher_is_one_of_the_label_gradients() {
        let m = linear();
        let s = sample(Label::Spoof);
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = estimate_fisher(&m, std::slice::from_ref(&s), 1, FisherMode::Sampled, &mut rng).unwrap();
            let got = f.importance["out.bias"].data().to_vec();
            let hit = (0..2).any(|y| {
                let (_, gb) = analytic(&m, &[1.5, -0.7], y);
                gb.iter().zip(&got).all(|(e, a)| (a - e * e).abs() < 1e-10)
            });
            assert!(hit);
        }
    }

    #[test]
    fn constant_head_input_gives_zero_head_fisher() {
        // a zero embedding makes both logits constant in the head weights
        let m = linear();
        let mut s = sample(Label::Spoof);
        s.values = vec![0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [FisherMode::Sampled, FisherMode::Expected, FisherMode::Empirical] {
            let f = estimate_fisher(&m, &[s.clone()], 1, mode, &mut rng).unwrap();
            assert!(f.importance["out.weight"].data().iter().all(|&v| v == 0.0));
            assert!(f.importance.values().all(|t| t.data().iter().all(|&v| v >= 0.0)));
        }
    }

    #[test]
    fn zero_model_zero_mas() {
        let mut m = linear();
        m.set_param("out.weight", Tensor::zeros(&[2, 2])).unwrap();
        m.set_param("out.bias", Tensor::zeros(&[2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = vec![sample(Label::Spoof), sample(Label::Bonafide)];
        let mas = mas_importance(&m, &data, 2, &mut rng).unwrap();
        assert!(mas.importance.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mas_matches_outer_product() {
        let m = linear();
        let x = [1.5, -0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imp = mas_importance(&m, &[sample(Label::Spoof)], 1, &mut rng).unwrap();
        let w = m.params().get("out.weight").unwrap().data();
        let b = m.params().get("out.bias").unwrap().data();
        let z: Vec<f64> = (0..2).map(|c| x[0] * w[c] + x[1] * w[2 + c] + b[c]).collect();
        // ∂‖z‖²/∂W[i][c] = 2 z_c x_i
        let expected = [
            2.0 * z[0] * x[0],
            2.0 * z[1] * x[0],
            2.0 * z[0] * x[1],
            2.0 * z[1] * x[1],
        ];
        for (a, e) in imp.importance["out.weight"].data().iter().zip(expected) {
            assert!((a - e.abs()).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_data_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(estimate_fisher(&linear(), &[], 1, FisherMode::Sampled, &mut rng).is_err());
        assert!(mas_importance(&linear(), &[], 1, &mut rng).is_err());
    }

    #[test]
    fn penalty_values() {
        let m = linear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut imp = mas_importance(&m, &[sample(Label::Spoof)], 1, &mut rng).unwrap();
        assert_eq!(quadratic_penalty(m.params(), &imp, 5.0).unwrap(), 0.0);
        for t in imp.importance.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        imp.importance.get_mut("out.bias").unwrap().data_mut()[0] = 2.0;
        imp.anchor.get_mut("out.bias").unwrap().data_mut()[0] -= 3.0;
        assert!((quadratic_penalty(m.params(), &imp, 1.0).unwrap() - 9.0).abs() < 1e-12);
        imp.anchor.remove("out.bias");
        assert!(quadratic_penalty(m.params(), &imp, 1.0).is_err());
    }

    #[test]
    fn accumulation_sums_importance() {
        let m = linear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = mas_importance(&m, &[sample(Label::Spoof)], 1, &mut rng).unwrap();
        let mut sum = a.clone();
        sum.accumulate(a.clone()).unwrap();
        for (name, t) in &sum.importance {
            for (x, y) in t.data().iter().zip(a.importance[name].data()) {
                assert_eq!(*x, 2.0 * y);
            }
        }
    }
}
