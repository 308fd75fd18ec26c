use cade_core::features::{dct_matrix, lfcc, LfccConfig, Waveform};
use cade_oracles::LfccParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(c: &LfccConfig) -> LfccParams {
    LfccParams {
        sample_rate: c.sample_rate,
        frame_len: c.frame_len,
        hop: c.hop,
        fft_size: c.fft_size,
        n_filters: c.n_filters,
        n_coeffs: c.n_coeffs,
        log_floor: c.log_floor,
    }
}

fn config(rng: &mut ChaCha8Rng, i: usize) -> LfccConfig {
    match i % 3 {
        0 => LfccConfig::default(),
        1 => LfccConfig {
            frame_len: 400,
            hop: 160,
            n_coeffs: 13,
            ..Default::default()
        },
        _ => {
            let frame_len = rng.random_range(100..=256);
            LfccConfig {
                sample_rate: 8000,
                frame_len,
                hop: rng.random_range(40..=frame_len),
                fft_size: 256,
                n_filters: rng.random_range(8..=24),
                n_coeffs: 8,
                log_floor: 1e-10,
            }
        }
    }
}

fn waveform(rng: &mut ChaCha8Rng, cfg: &LfccConfig) -> Waveform {
    let n = cfg.frame_len + cfg.hop * rng.random_range(0..8) + rng.random_range(0..cfg.hop);
    let f = rng.random_range(50.0..cfg.sample_rate as f64 / 2.0);
    let amp = rng.random_range(0.0..0.5);
    let noise = rng.random_range(0.0..0.3);
    let silent_from = rng.random_range(0..n);
    let sr = cfg.sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            if i >= silent_from && i < silent_from + cfg.frame_len {
                return 0.0;
            }
            let t = i as f64 / sr;
            amp * (2.0 * std::f64::consts::PI * f * t).sin() + noise * rng.random_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(samples, cfg.sample_rate).unwrap()
}

#[test]
fn pipeline_matches_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..50 {
        let cfg = config(&mut rng, i);
        let w = waveform(&mut rng, &cfg);
        let got = lfcc(&w, &cfg).unwrap();
        let want = cade_oracles::lfcc(&w.samples, &params(&cfg));
        assert_eq!(got.frames, want.len());
        assert_eq!(got.n_coeffs, cfg.n_coeffs);
        for (t, row) in want.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                let g = got.values[t * cfg.n_coeffs + k];
                assert!((g - v).abs() <= 1e-9, "waveform {i} frame {t} coeff {k}: {g} vs {v}");
            }
        }
    }
}

#[test]
fn dct_is_orthonormal() {
    for n in [1, 2, 5, 20, 40] {
        let d = dct_matrix(n);
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| d[a * n + i] * d[b * n + i]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() <= 1e-12, "n={n} rows {a},{b}: {dot}");
            }
        }
    }
}

#[test]
fn too_short_and_wrong_rate_rejected() {
    let cfg = LfccConfig::default();
    assert!(lfcc(&Waveform::new(vec![0.1; 100], 16_000).unwrap(), &cfg).is_err());
    assert!(lfcc(&Waveform::new(vec![0.1; 1000], 8000).unwrap(), &cfg).is_err());
}
