//! Slow, direct reference computations for checking the library. Nothing
//! here shares code with `cade-core`; inputs and outputs are plain numbers.

use std::f64::consts::PI;

/// Front-end parameters, mirrored field by field.
#[derive(Clone, Copy, Debug)]
pub struct LfccParams {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_filters: usize,
    pub n_coeffs: usize,
    pub log_floor: f64,
}

/// LFCCs computed the long way: direct DFT of each windowed frame, an
/// explicit triangle per filter, and the DCT-II sum written out.
/// Returns one row of `n_coeffs` per frame.
pub fn lfcc(samples: &[f64], p: &LfccParams) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    let mut start = 0;
    while start + p.frame_len <= samples.len() {
        let frame = &samples[start..start + p.frame_len];
        let mut padded = vec![0.0; p.fft_size];
        for n in 0..p.frame_len {
            let w = if p.frame_len == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * PI * n as f64 / (p.frame_len - 1) as f64).cos()
            };
            padded[n] = frame[n] * w;
        }
        let bins = p.fft_size / 2 + 1;
        let mut power = vec![0.0; bins];
        for (k, pk) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in padded.iter().enumerate() {
                // reduce the phase index first so the angle stays small
                let ang = -2.0 * PI * ((k * n) % p.fft_size) as f64 / p.fft_size as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *pk = re * re + im * im;
        }
        let nyq = p.sample_rate as f64 / 2.0;
        let step = nyq / (p.n_filters + 1) as f64;
        let mut logs = vec![0.0; p.n_filters];
        for (m, lm) in logs.iter_mut().enumerate() {
            let lo = m as f64 * step;
            let mid = (m + 1) as f64 * step;
            let hi = (m + 2) as f64 * step;
            let mut e = 0.0;
            for (k, pk) in power.iter().enumerate() {
                let f = k as f64 * p.sample_rate as f64 / p.fft_size as f64;
                let weight = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                e += weight * pk;
            }
            *lm = e.max(p.log_floor).ln();
        }
        let nf = p.n_filters as f64;
        let row = (0..p.n_coeffs)
            .map(|k| {
                let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
                let mut c = 0.0;
                for (i, l) in logs.iter().enumerate() {
                    c += l * (PI * k as f64 * (i as f64 + 0.5) / nf).cos();
                }
                scale * c
            })
            .collect();
        rows.push(row);
        start += p.hop;
    }
    rows
}

/// EER by enumerating every threshold: `−∞`, each midpoint between adjacent
/// distinct scores, and `+∞`. A sample is accepted when its score is at least
/// the threshold. The threshold with the smallest `|FAR − FRR|` wins, the
/// lowest one on ties; rates are compared as exact fractions. `bona[i]` is
/// true for bona fide samples. Panics unless both classes are present.
pub fn eer(scores: &[f64], bona: &[bool]) -> f64 {
    let n_b = bona.iter().filter(|&&b| b).count();
    let n_s = bona.len() - n_b;
    assert!(n_b > 0 && n_s > 0, "both classes required");
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    thresholds.push(f64::INFINITY);
    let mut best: Option<(u128, usize, usize)> = None;
    for &t in &thresholds {
        let mut fa = 0;
        let mut fr = 0;
        for (&s, &b) in scores.iter().zip(bona) {
            let accepted = s >= t;
            if b && !accepted {
                fr += 1;
            }
            if !b && accepted {
                fa += 1;
            }
        }
        let gap = (fa as u128 * n_b as u128).abs_diff(fr as u128 * n_s as u128);
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, fa, fr));
        }
    }
    let (_, fa, fr) = best.expect("at least two thresholds");
    (fa as f64 / n_s as f64 + fr as f64 / n_b as f64) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eer_hand_cases() {
        assert_eq!(eer(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]), 0.0);
        assert_eq!(eer(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]), 1.0);
        assert_eq!(eer(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]), 0.5);
    }

    #[test]
    fn dft_of_constant_frame() {
        // a single rectangular frame of ones: only bin 0 carries energy
        let p = LfccParams {
            sample_rate: 8,
            frame_len: 1,
            hop: 1,
            fft_size: 4,
            n_filters: 2,
            n_coeffs: 2,
            log_floor: 1e-10,
        };
        let rows = lfcc(&[1.0, 1.0], &p);
        assert_eq!(rows.len(), 2);
        assert!(rows[0].iter().all(|v| v.is_finite()));
    }
}
