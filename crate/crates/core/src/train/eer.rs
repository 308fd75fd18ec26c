use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Label;

/// One detection score per utterance (higher means more bona fide).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {s}")));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Concatenates score sets.
    pub fn merge(sets: &[ScoreSet]) -> ScoreSet {
        ScoreSet {
            scores: sets.iter().flat_map(|s| s.scores.iter().copied()).collect(),
            labels: sets.iter().flat_map(|s| s.labels.iter().copied()).collect(),
        }
    }
}

/// The operating point chosen by [`eer_point`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    /// Spoof samples accepted.
    pub false_accepts: usize,
    /// Bona fide samples rejected.
    pub false_rejects: usize,
    pub n_spoof: usize,
    pub n_bonafide: usize,
    /// Smallest accepted score; `None` for the threshold above every score.
    pub threshold: Option<f64>,
}

impl EerPoint {
    pub fn far(&self) -> f64 {
        self.false_accepts as f64 / self.n_spoof as f64
    }

    pub fn frr(&self) -> f64 {
        self.false_rejects as f64 / self.n_bonafide as f64
    }

    pub fn eer(&self) -> f64 {
        (self.far() + self.frr()) / 2.0
    }
}

/// Sweeps every threshold between adjacent distinct scores (plus both
/// extremes), accepting scores `>= t`, and returns the first (lowest)
/// threshold minimizing `|FAR − FRR|`. The comparison is exact: rates are
/// compared by integer cross-multiplication.
pub fn eer_point(s: &ScoreSet) -> Result<EerPoint> {
    let n_bona = s.labels.iter().filter(|&&l| l == Label::Bonafide).count();
    let n_spoof = s.len() - n_bona;
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::Invalid(format!(
            "EER needs both classes, got {n_bona} bona fide and {n_spoof} spoof"
        )));
    }
    if let Some(v) = s.scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {v}")));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // threshold below every score: everything accepted
    let mut fa = n_spoof;
    let mut fr = 0usize;
    let gap = |fa: usize, fr: usize| (fa as u128 * n_bona as u128).abs_diff(fr as u128 * n_spoof as u128);
    let mut best = (gap(fa, fr), fa, fr, order.first().map(|&i| s.scores[i]));
    let mut i = 0;
    while i < order.len() {
        // move the threshold just above the group of equal scores at `i`
        let v = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == v {
            match s.labels[order[i]] {
                Label::Spoof => fa -= 1,
                Label::Bonafide => fr += 1,
            }
            i += 1;
        }
        let next = order.get(i).map(|&j| s.scores[j]);
        let g = gap(fa, fr);
        if g < best.0 {
            best = (g, fa, fr, next);
        }
    }
    Ok(EerPoint {
        false_accepts: best.1,
        false_rejects: best.2,
        n_spoof,
        n_bonafide: n_bona,
        threshold: best.3,
    })
}

/// Equal error rate in `[0, 1]`.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    Ok(eer_point(s)?.eer())
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Bonafide as B, Spoof as S};

    fn set(bona: &[f64], spoof: &[f64]) -> ScoreSet {
        let mut scores = bona.to_vec();
        scores.extend_from_slice(spoof);
        let mut labels = vec![B; bona.len()];
        labels.extend(vec![S; spoof.len()]);
        ScoreSet::new(scores, labels).unwrap()
    }

    #[test]
    fn separated_and_inverted() {
        assert_eq!(eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(eer(&set(&[0.1, 0.2], &[0.9, 0.8])).unwrap(), 1.0);
    }

    #[test]
    fn interleaved_case() {
        let p = eer_point(&set(&[0.8, 0.4], &[0.6, 0.2])).unwrap();
        assert_eq!(p.eer(), 0.5);
        assert_eq!(p.threshold, Some(0.6));
        assert_eq!((p.far(), p.frr()), (0.5, 0.5));
    }

    #[test]
    fn single_class_rejected() {
        assert!(eer(&set(&[0.1, 0.2], &[])).is_err());
        assert!(eer(&set(&[], &[0.1])).is_err());
    }

    #[test]
    fn all_scores_equal() {
        // only the two extremes exist; both give |FAR − FRR| = 1, lower wins
        let p = eer_point(&set(&[0.5, 0.5], &[0.5])).unwrap();
        assert_eq!((p.false_accepts, p.false_rejects), (1, 0));
        assert_eq!(p.eer(), 0.5);
    }
}
