//! The four CADE loss terms, as graph builders (for training) and as plain
//! value functions (for inspection and tests). Teacher quantities always
//! enter as constants, so gradients reach the student only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{eval_op, Graph, OpKind, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Coefficients of the distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.02,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

/// Mean softmax cross-entropy of `[N, 2]` logits.
pub fn classification_term(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Invalid("classification loss on an empty batch".into()));
    }
    g.apply(
        OpKind::SoftmaxCrossEntropy {
            labels: labels.to_vec(),
        },
        &[logits],
    )
}

/// `-(1/N) Σ_n Σ_i σ(y_ni) · ln σ(ŷ_ni)` over `[N, K]` logits.
pub fn kd_term(g: &mut Graph, teacher_logits: &Tensor, student_logits: Var) -> Result<Var> {
    let s = g.value(student_logits).shape().to_vec();
    if teacher_logits.shape() != s.as_slice() {
        return Err(shape_err(
            "kd_loss",
            format!("teacher {:?} vs student {s:?}", teacher_logits.shape()),
        ));
    }
    let rows = if s.len() > 1 { s[0] } else { 1 };
    let soft = g.constant(eval_op(&OpKind::Sigmoid, &[teacher_logits])?);
    let log_student = g.apply(OpKind::LogSigmoid, &[student_logits])?;
    let prod = g.mul(soft, log_student)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / rows as f64)
}

/// Mean over samples of `Σ_j |t_j/‖t‖ − s_j/‖s‖|` for `[N, l]` attention maps.
/// A zero-norm map normalizes to the zero vector.
pub fn ad_term(g: &mut Graph, teacher_maps: &Tensor, student_maps: Var) -> Result<Var> {
    let s = g.value(student_maps).shape().to_vec();
    if teacher_maps.shape() != s.as_slice() {
        return Err(shape_err(
            "ad_loss",
            format!("teacher map {:?} vs student map {s:?}", teacher_maps.shape()),
        ));
    }
    let rows = if s.len() > 1 { s[0] } else { 1 };
    let t = g.constant(eval_op(&OpKind::Normalize, &[teacher_maps])?);
    let sn = g.apply(OpKind::Normalize, &[student_maps])?;
    let diff = g.sub(t, sn)?;
    let abs = g.apply(OpKind::Abs, &[diff])?;
    let total = g.sum(abs)?;
    g.scale(total, 1.0 / rows as f64)
}

/// `Σ_layers (1/N_P) Σ_{positive k} (1 − cos(teacher_k, student_k))`.
/// Zero (a constant) when no sample is positive.
pub fn psa_term(g: &mut Graph, teacher_taps: &[Tensor], student_taps: &[Var], positive: &[bool]) -> Result<Var> {
    if teacher_taps.len() != student_taps.len() || teacher_taps.is_empty() {
        return Err(shape_err(
            "psa_loss",
            format!(
                "{} teacher taps vs {} student taps",
                teacher_taps.len(),
                student_taps.len()
            ),
        ));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mask = Tensor::vector(positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect());
    let mut total: Option<Var> = None;
    for (t, &s) in teacher_taps.iter().zip(student_taps) {
        let shape = g.value(s).shape().to_vec();
        if t.shape() != shape.as_slice() || shape[0] != positive.len() {
            return Err(shape_err(
                "psa_loss",
                format!(
                    "teacher tap {:?}, student tap {shape:?}, {} mask entries",
                    t.shape(),
                    positive.len()
                ),
            ));
        }
        let tv = g.constant(t.clone());
        let cos = g.apply(OpKind::CosineSimilarity, &[tv, s])?;
        let ones = g.constant(Tensor::ones(&[positive.len()]));
        let dist = g.sub(ones, cos)?;
        let m = g.constant(mask.clone());
        let picked = g.mul(dist, m)?;
        let layer_sum = g.sum(picked)?;
        let layer = g.scale(layer_sum, 1.0 / n_pos as f64)?;
        total = Some(match total {
            Some(acc) => g.add(acc, layer)?,
            None => layer,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// `total + weight · term`, skipping the term entirely when `weight` is 0.
pub fn add_weighted(g: &mut Graph, total: Var, term: Option<Var>, weight: f64) -> Result<Var> {
    match term {
        Some(t) if weight != 0.0 => {
            let w = if weight == 1.0 { t } else { g.scale(t, weight)? };
            g.add(total, w)
        }
        _ => Ok(total),
    }
}

fn value_graph(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    g.value(v).item()
}

/// Mean softmax cross-entropy; `logits` is `[N, 2]`.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    value_graph(|g| {
        let l = g.constant(logits.clone());
        classification_term(g, l, labels)
    })
}

/// `-Σ_i σ(y_i) · ln σ(ŷ_i)` for one prediction vector.
pub fn kd_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(shape_err("kd_loss", format!("lengths {} and {}", y.len(), y_hat.len())));
    }
    value_graph(|g| {
        let s = g.constant(Tensor::new(vec![1, y_hat.len()], y_hat.to_vec())?);
        kd_term(g, &Tensor::new(vec![1, y.len()], y.to_vec())?, s)
    })
}

/// L1 distance between two L2-normalized maps.
pub fn ad_loss(q_teacher: &[f64], q_student: &[f64]) -> Result<f64> {
    if q_teacher.len() != q_student.len() || q_teacher.is_empty() {
        return Err(shape_err(
            "ad_loss",
            format!("map lengths {} and {}", q_teacher.len(), q_student.len()),
        ));
    }
    value_graph(|g| {
        let s = g.constant(Tensor::new(vec![1, q_student.len()], q_student.to_vec())?);
        ad_term(g, &Tensor::new(vec![1, q_teacher.len()], q_teacher.to_vec())?, s)
    })
}

/// Positive-sample alignment over tap layers, each `[N, D_l]`.
pub fn psa_loss(teacher_taps: &[Tensor], student_taps: &[Tensor], positive: &[bool]) -> Result<f64> {
    value_graph(|g| {
        let s: Vec<Var> = student_taps.iter().map(|t| g.constant(t.clone())).collect();
        psa_term(g, teacher_taps, &s, positive)
    })
}

/// `Σ_layers (1/N_P) Σ_{positive k} cos(teacher_k, student_k)`: the summed
/// similarity, reported for diagnostics only.
pub fn psa_similarity(teacher_taps: &[Tensor], student_taps: &[Tensor], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(0.0);
    }
    let loss = psa_loss(teacher_taps, student_taps, positive)?;
    Ok(teacher_taps.len() as f64 - loss)
}

/// `l_c + α·l_kd + β·l_ad + γ·l_psa`
pub fn cade_loss(l_c: f64, l_kd: f64, l_ad: f64, l_psa: f64, w: &LossWeights) -> Result<f64> {
    let parts = [l_c, l_kd, l_ad, l_psa];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss components {parts:?}")));
    }
    let mut total = l_c;
    for (v, weight) in [(l_kd, w.alpha), (l_ad, w.beta), (l_psa, w.gamma)] {
        if weight != 0.0 {
            total += weight * v;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_values() {
        let ln2 = 2f64.ln();
        let l = classification_loss(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), &[1]).unwrap();
        assert!((l - ln2).abs() < 1e-15);
        let l = classification_loss(&Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap(), &[0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(classification_loss(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), &[]).is_err());
    }

    #[test]
    fn kd_values() {
        assert!(kd_loss(&[40.0, 40.0], &[40.0, 40.0]).unwrap() < 1e-15);
        assert!(kd_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ad_values() {
        assert_eq!(ad_loss(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(ad_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(ad_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(ad_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn psa_values() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 5.0, 5.0]).unwrap();
        let s = Tensor::new(vec![2, 2], vec![0.0, 1.0, -1.0, 2.0]).unwrap();
        // only the first (orthogonal) row is positive
        assert!(
            (psa_loss(std::slice::from_ref(&t), std::slice::from_ref(&s), &[true, false]).unwrap() - 1.0).abs() < 1e-15
        );
        assert_eq!(
            psa_loss(std::slice::from_ref(&t), std::slice::from_ref(&s), &[false, false]).unwrap(),
            0.0
        );
        assert!(psa_loss(std::slice::from_ref(&t), &[], &[true, true]).is_err());
        assert!((psa_similarity(std::slice::from_ref(&t), &[s], &[true, false]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            gamma: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn cade_combination() {
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(cade_loss(0.7, 0.3, 0.2, 0.1, &zero).unwrap(), 0.7);
        let one = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        };
        assert_eq!(cade_loss(1.0, 1.0, 1.0, 1.0, &one).unwrap(), 4.0);
        assert!(cade_loss(f64::NAN, 0.0, 0.0, 0.0, &one).is_err());
    }
}
