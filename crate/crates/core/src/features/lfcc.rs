use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Waveform;

/// Front-end settings. Defaults: 16 kHz, 512-sample frames, hop 256,
/// 512-point FFT, 20 linear filters, 20 coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LfccConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_filters: usize,
    pub n_coeffs: usize,
    pub log_floor: f64,
}

impl Default for LfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len: 512,
            hop: 256,
            fft_size: 512,
            n_filters: 20,
            n_coeffs: 20,
            log_floor: 1e-10,
        }
    }
}

impl LfccConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("lfcc: {m}")));
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if self.frame_len == 0 || self.hop == 0 || self.hop > self.frame_len {
            return fail(format!(
                "need 0 < hop <= frame_len, got hop {} frame_len {}",
                self.hop, self.frame_len
            ));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.frame_len {
            return fail(format!(
                "fft_size {} must be a power of two >= frame_len",
                self.fft_size
            ));
        }
        if self.n_filters == 0 || self.n_coeffs == 0 || self.n_coeffs > self.n_filters {
            return fail(format!(
                "need 1 <= n_coeffs <= n_filters, got {} and {}",
                self.n_coeffs, self.n_filters
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return fail("log_floor must be a small positive number".into());
        }
        Ok(())
    }

    /// Waveform length that yields exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.frame_len + frames.saturating_sub(1) * self.hop
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.frame_len {
            0
        } else {
            1 + (samples - self.frame_len) / self.hop
        }
    }
}

/// Frames × coefficients, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Cepstrogram {
    pub frames: usize,
    pub n_coeffs: usize,
    pub values: Vec<f64>,
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Triangular filters with unit peaks, centers linearly spaced so that the
/// outer edges sit at 0 Hz and Nyquist. Rows are filters, columns FFT bins.
pub fn linear_filterbank(n_filters: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let bins = fft_size / 2 + 1;
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| i as f64 * nyquist / (n_filters + 1) as f64)
        .collect();
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / fft_size as f64;
                    if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II basis, `n × n` row-major; row `k` is basis vector `k`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m.push(s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos());
        }
    }
    m
}

/// Magnitude-squared spectrum (`fft_size/2 + 1` bins) of a Hamming-windowed,
/// zero-padded frame.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Result<Vec<f64>> {
    if frame.is_empty() {
        return Err(Error::Invalid("empty frame".into()));
    }
    if frame.len() > fft_size {
        return Err(Error::Invalid(format!(
            "frame of {} samples exceeds fft_size {fft_size}",
            frame.len()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    Ok(windowed_spectrum(frame, &hamming(frame.len()), fft.as_ref(), fft_size))
}

fn windowed_spectrum(frame: &[f64], window: &[f64], fft: &dyn Fft<f64>, fft_size: usize) -> Vec<f64> {
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for ((b, x), w) in buf.iter_mut().zip(frame).zip(window) {
        b.re = x * w;
    }
    fft.process(&mut buf);
    buf[..fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Precomputed window, filterbank, DCT basis and FFT plan.
pub struct Lfcc {
    cfg: LfccConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Lfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lfcc").field("cfg", &self.cfg).finish()
    }
}

impl Lfcc {
    pub fn new(cfg: &LfccConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            window: hamming(cfg.frame_len),
            filters: linear_filterbank(cfg.n_filters, cfg.fft_size, cfg.sample_rate),
            dct: dct_matrix(cfg.n_filters),
            fft: FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &LfccConfig {
        &self.cfg
    }

    /// Filterbank energies of one frame.
    pub fn filter_energies(&self, frame: &[f64]) -> Vec<f64> {
        let spec = windowed_spectrum(frame, &self.window, self.fft.as_ref(), self.cfg.fft_size);
        self.filters
            .iter()
            .map(|row| row.iter().zip(&spec).map(|(w, p)| w * p).sum())
            .collect()
    }

    pub fn extract(&self, w: &Waveform) -> Result<Cepstrogram> {
        let cfg = &self.cfg;
        if w.sample_rate != cfg.sample_rate {
            return Err(Error::Invalid(format!(
                "waveform sampled at {} Hz, front-end expects {} Hz",
                w.sample_rate, cfg.sample_rate
            )));
        }
        let frames = cfg.frame_count(w.samples.len());
        if frames == 0 {
            return Err(Error::Invalid(format!(
                "waveform of {} samples is shorter than one frame ({})",
                w.samples.len(),
                cfg.frame_len
            )));
        }
        let nf = cfg.n_filters;
        let mut values = Vec::with_capacity(frames * cfg.n_coeffs);
        for t in 0..frames {
            let frame = &w.samples[t * cfg.hop..t * cfg.hop + cfg.frame_len];
            let logs: Vec<f64> = self
                .filter_energies(frame)
                .into_iter()
                .map(|e| e.max(cfg.log_floor).ln())
                .collect();
            for k in 0..cfg.n_coeffs {
                let basis = &self.dct[k * nf..(k + 1) * nf];
                values.push(basis.iter().zip(&logs).map(|(b, l)| b * l).sum());
            }
        }
        Ok(Cepstrogram {
            frames,
            n_coeffs: cfg.n_coeffs,
            values,
        })
    }
}

/// One-shot extraction.
pub fn lfcc(w: &Waveform, cfg: &LfccConfig) -> Result<Cepstrogram> {
    Lfcc::new(cfg)?.extract(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frame_zero_spectrum() {
        let s = power_spectrum(&[0.0; 64], 64).unwrap();
        assert_eq!(s.len(), 33);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_is_flat_at_window_start() {
        let mut frame = vec![0.0; 400];
        frame[0] = 1.0;
        let w0 = hamming(400)[0];
        for v in power_spectrum(&frame, 512).unwrap() {
            assert!((v - w0 * w0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_frame_rejected() {
        assert!(power_spectrum(&[], 8).is_err());
    }

    #[test]
    fn silence_gives_constant_log_floor_cepstrum() {
        let cfg = LfccConfig::default();
        let w = Waveform::new(vec![0.0; cfg.samples_for_frames(3)], cfg.sample_rate).unwrap();
        let c = lfcc(&w, &cfg).unwrap();
        assert_eq!(c.frames, 3);
        let c0 = (cfg.n_filters as f64).sqrt() * cfg.log_floor.ln();
        for row in c.values.chunks(cfg.n_coeffs) {
            assert!((row[0] - c0).abs() < 1e-9);
            assert!(row[1..].iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn config_invariants() {
        let mut cfg = LfccConfig {
            hop: 600,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.hop = 256;
        cfg.n_coeffs = 30;
        assert!(cfg.validate().is_err());
        cfg.n_coeffs = 20;
        cfg.fft_size = 500;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_waveform_rejected() {
        let cfg = LfccConfig::default();
        let w = Waveform::new(vec![0.0; 100], cfg.sample_rate).unwrap();
        assert!(lfcc(&w, &cfg).is_err());
    }
}
