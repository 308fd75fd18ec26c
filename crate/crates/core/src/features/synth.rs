//! Synthetic bona fide / spoof task streams.
//!
//! Bona fide audio is a harmonic tone complex with random pitch, partial
//! amplitudes, phases and level, plus a small white-noise floor and random
//! nuisance components (stray tones, band noise, slow modulation) whose
//! parameters are drawn over the whole band. The process is the same for
//! every task. A spoofed clip is a fresh draw of that process
//! passed through the distortions of one of the task's spoof families:
//! additive tones, band-limited noise, amplitude modulation and a mixing gain.
//! Tone and noise gains are relative to the clean clip's RMS.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{fingerprint_of, FeatureMap, Label, Lfcc, LfccConfig, Task, TaskStream, Waveform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    /// Hz
    pub freq: f64,
    /// amplitude relative to clip RMS
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandNoise {
    pub lo: f64,
    pub hi: f64,
    /// noise RMS relative to clip RMS
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplitudeModulation {
    /// Hz
    pub rate: f64,
    /// 0..=1
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpoofFamily {
    pub name: String,
    #[serde(default)]
    pub tones: Vec<Tone>,
    #[serde(default)]
    pub band_noise: Option<BandNoise>,
    #[serde(default)]
    pub am: Option<AmplitudeModulation>,
    #[serde(default = "unit")]
    pub mix_gain: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseProcess {
    pub f0_min: f64,
    pub f0_max: f64,
    pub harmonics: usize,
    /// white-noise floor standard deviation
    pub noise: f64,
    /// clip RMS range before the noise floor
    pub level_min: f64,
    pub level_max: f64,
    pub nuisance: Nuisance,
}

impl Default for BaseProcess {
    fn default() -> Self {
        Self {
            f0_min: 100.0,
            f0_max: 220.0,
            harmonics: 10,
            noise: 0.003,
            level_min: 0.05,
            level_max: 0.15,
            nuisance: Nuisance::default(),
        }
    }
}

/// Random components added to every clip, so that a spoof family is only
/// recognizable by where its distortions sit, not by their presence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Nuisance {
    /// Hz range for stray tone frequencies and band-noise centers.
    pub freq_lo: f64,
    pub freq_hi: f64,
    /// Up to this many stray tones per clip (uniform count).
    pub max_tones: usize,
    /// Tone amplitude range relative to clip RMS.
    pub tone_gain: [f64; 2],
    pub band_prob: f64,
    /// Hz
    pub band_width: f64,
    pub band_gain: [f64; 2],
    pub am_prob: f64,
    pub am_rate: [f64; 2],
    pub am_depth: f64,
}

impl Default for Nuisance {
    fn default() -> Self {
        Self {
            freq_lo: 500.0,
            freq_hi: 7500.0,
            max_tones: 1,
            tone_gain: [0.3, 0.9],
            band_prob: 0.5,
            band_width: 800.0,
            band_gain: [0.3, 0.7],
            am_prob: 0.5,
            am_rate: [4.0, 14.0],
            am_depth: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub families: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub base: BaseProcess,
    pub families: Vec<SpoofFamily>,
    pub tasks: Vec<TaskSpec>,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    /// LFCC frames per clip
    pub frames: usize,
}

fn tone(freq: f64, gain: f64) -> Tone {
    Tone { freq, gain }
}

impl Default for SynthConfig {
    /// Six families in three pairs, each pair occupying its own frequency
    /// region: `A1+A2 → A3+A4 → A5+A6`.
    fn default() -> Self {
        let fam = |name: &str, tones: Vec<Tone>, band: Option<(f64, f64, f64)>, am: Option<(f64, f64)>, mix: f64| {
            SpoofFamily {
                name: name.to_string(),
                tones,
                band_noise: band.map(|(lo, hi, gain)| BandNoise { lo, hi, gain }),
                am: am.map(|(rate, depth)| AmplitudeModulation { rate, depth }),
                mix_gain: mix,
            }
        };
        Self {
            base: BaseProcess::default(),
            families: vec![
                fam("A1", vec![tone(2600.0, 0.6)], None, None, 1.0),
                fam("A2", vec![], Some((2400.0, 3200.0, 0.5)), Some((6.0, 0.5)), 1.0),
                fam("A3", vec![tone(4300.0, 0.6)], None, None, 1.0),
                fam("A4", vec![], Some((4000.0, 4800.0, 0.5)), Some((9.0, 0.5)), 1.0),
                fam("A5", vec![tone(6200.0, 0.6)], None, None, 1.0),
                fam("A6", vec![], Some((5800.0, 6600.0, 0.5)), Some((12.0, 0.5)), 1.0),
            ],
            tasks: vec![
                TaskSpec {
                    families: vec!["A1".into(), "A2".into()],
                },
                TaskSpec {
                    families: vec!["A3".into(), "A4".into()],
                },
                TaskSpec {
                    families: vec!["A5".into(), "A6".into()],
                },
            ],
            train_per_task: 2000,
            eval_per_task: 500,
            frames: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator: {m}")));
        let nyquist = sample_rate as f64 / 2.0;
        let b = &self.base;
        if !(b.f0_min > 0.0 && b.f0_min <= b.f0_max && b.f0_max < nyquist) {
            return fail(format!("f0 range [{}, {}] invalid", b.f0_min, b.f0_max));
        }
        if b.harmonics == 0 || !(0.0..=0.1).contains(&b.noise) {
            return fail("need >= 1 harmonic and noise in [0, 0.1]".into());
        }
        let n = &b.nuisance;
        let range_ok = |r: [f64; 2], max: f64| r[0] >= 0.0 && r[0] <= r[1] && r[1] <= max;
        if !(n.freq_lo > 0.0 && n.freq_lo < n.freq_hi && n.freq_hi < nyquist)
            || !(n.band_width > 0.0 && n.band_width < n.freq_hi - n.freq_lo)
            || !range_ok(n.tone_gain, 10.0)
            || !range_ok(n.band_gain, 10.0)
            || !(range_ok(n.am_rate, 100.0) && n.am_rate[0] > 0.0)
            || ![n.band_prob, n.am_prob, n.am_depth]
                .iter()
                .all(|p| (0.0..=1.0).contains(p))
        {
            return fail(format!("nuisance parameters out of range: {n:?}"));
        }
        if !(b.level_min > 0.0 && b.level_min <= b.level_max && b.level_max <= 0.3) {
            return fail("level range must satisfy 0 < min <= max <= 0.3".into());
        }
        if self.tasks.is_empty() {
            return fail("at least one task is required".into());
        }
        if self.train_per_task < 2 || self.eval_per_task < 2 {
            return fail("each split needs at least 2 clips (one per class)".into());
        }
        if self.frames == 0 {
            return fail("frames must be positive".into());
        }
        for f in &self.families {
            for t in &f.tones {
                if !(t.freq > 0.0 && t.freq < nyquist) || !(0.0..=10.0).contains(&t.gain) {
                    return fail(format!("family {}: tone {t:?} out of range", f.name));
                }
            }
            if let Some(n) = &f.band_noise {
                if !(n.lo >= 0.0 && n.lo < n.hi && n.hi <= nyquist) || !(0.0..=10.0).contains(&n.gain) {
                    return fail(format!("family {}: band noise {n:?} out of range", f.name));
                }
            }
            if let Some(am) = &f.am {
                if !(am.rate > 0.0 && am.rate <= 100.0) || !(0.0..=1.0).contains(&am.depth) {
                    return fail(format!("family {}: modulation {am:?} out of range", f.name));
                }
            }
            if !(f.mix_gain > 0.0 && f.mix_gain <= 4.0) {
                return fail(format!("family {}: mix_gain {} outside (0, 4]", f.name, f.mix_gain));
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.families.is_empty() {
                return fail(format!("task {} has no spoof family", i + 1));
            }
            for name in &t.families {
                if !self.families.iter().any(|f| &f.name == name) {
                    return fail(format!("task {} names unknown family `{name}`", i + 1));
                }
            }
        }
        Ok(())
    }

    fn family(&self, name: &str) -> &SpoofFamily {
        self.families.iter().find(|f| f.name == name).expect("validated")
    }
}

struct Renderer<'a> {
    base: &'a BaseProcess,
    sample_rate: f64,
    len: usize,
    fft_len: usize,
    planner: FftPlanner<f64>,
}

impl Renderer<'_> {
    fn bona_fide(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = self.clean(rng);
        let level = rms(&x);
        let n = self.base.nuisance.clone();
        for _ in 0..rng.random_range(0..=n.max_tones) {
            let freq = rng.random_range(n.freq_lo..n.freq_hi);
            let amp = rng.random_range(n.tone_gain[0]..=n.tone_gain[1]) * level * 2f64.sqrt();
            let phase = rng.random_range(0.0..2.0 * PI);
            add_sine(&mut x, freq, amp, phase, self.sample_rate);
        }
        if rng.random_bool(n.band_prob) {
            let center = rng.random_range(n.freq_lo + n.band_width / 2.0..n.freq_hi - n.band_width / 2.0);
            let gain = rng.random_range(n.band_gain[0]..=n.band_gain[1]) * level;
            let noise = self.band_noise(center - n.band_width / 2.0, center + n.band_width / 2.0, rng);
            for (v, e) in x.iter_mut().zip(noise) {
                *v += gain * e;
            }
        }
        if rng.random_bool(n.am_prob) {
            let rate = rng.random_range(n.am_rate[0]..=n.am_rate[1]);
            modulate(
                &mut x,
                rate,
                n.am_depth,
                rng.random_range(0.0..2.0 * PI),
                self.sample_rate,
            );
        }
        x
    }

    fn clean(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let b = self.base;
        let f0 = rng.random_range(b.f0_min..=b.f0_max);
        let mut x = vec![0.0; self.len];
        for h in 1..=b.harmonics {
            let freq = f0 * h as f64;
            let amp = rng.random_range(0.6..1.0) / h as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            if freq >= 0.95 * self.sample_rate / 2.0 {
                continue;
            }
            add_sine(&mut x, freq, amp, phase, self.sample_rate);
        }
        let level = rng.random_range(b.level_min..=b.level_max);
        let r = rms(&x);
        x.iter_mut().for_each(|v| *v *= level / r);
        x
    }

    fn band_noise(&mut self, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.fft_len;
        let normal = Normal::new(0.0, 1.0).expect("valid");
        let mut spec = vec![Complex::new(0.0, 0.0); n];
        let k_lo = ((lo * n as f64 / self.sample_rate).ceil() as usize).max(1);
        let k_hi = ((hi * n as f64 / self.sample_rate).floor() as usize).min(n / 2 - 1);
        for k in k_lo..=k_hi.max(k_lo) {
            let c = Complex::new(normal.sample(rng), normal.sample(rng));
            spec[k] = c;
            spec[n - k] = c.conj();
        }
        self.planner.plan_fft_inverse(n).process(&mut spec);
        let mut out: Vec<f64> = spec[..self.len].iter().map(|c| c.re).collect();
        let r = rms(&out);
        if r > 0.0 {
            out.iter_mut().for_each(|v| *v /= r);
        }
        out
    }

    fn spoof(&mut self, fam: &SpoofFamily, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = self.bona_fide(rng);
        let level = rms(&x);
        for t in &fam.tones {
            let freq = t.freq * rng.random_range(0.98..1.02);
            let amp = t.gain * rng.random_range(0.7..1.3) * level * 2f64.sqrt();
            let phase = rng.random_range(0.0..2.0 * PI);
            add_sine(&mut x, freq, amp, phase, self.sample_rate);
        }
        if let Some(n) = &fam.band_noise {
            let gain = n.gain * rng.random_range(0.7..1.3) * level;
            let noise = self.band_noise(n.lo, n.hi, rng);
            for (v, e) in x.iter_mut().zip(noise) {
                *v += gain * e;
            }
        }
        if let Some(am) = &fam.am {
            modulate(
                &mut x,
                am.rate,
                am.depth,
                rng.random_range(0.0..2.0 * PI),
                self.sample_rate,
            );
        }
        x.iter_mut().for_each(|v| *v *= fam.mix_gain);
        x
    }

    fn finish(&self, mut x: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<Waveform> {
        if self.base.noise > 0.0 {
            let normal = Normal::new(0.0, self.base.noise).expect("valid");
            x.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Waveform::new(x, self.sample_rate as u32)
    }
}

fn add_sine(x: &mut [f64], freq: f64, amp: f64, phase: f64, sr: f64) {
    let w = 2.0 * PI * freq / sr;
    for (i, v) in x.iter_mut().enumerate() {
        *v += amp * (w * i as f64 + phase).sin();
    }
}

fn modulate(x: &mut [f64], rate: f64, depth: f64, phase: f64, sr: f64) {
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        *v *= 1.0 + depth * (2.0 * PI * rate * t + phase).sin();
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Renders and featurizes every task; a pure function of its arguments.
pub fn synth_task_stream(cfg: &SynthConfig, lfcc: &LfccConfig, seed: u64) -> Result<TaskStream> {
    lfcc.validate()?;
    cfg.validate(lfcc.sample_rate)?;
    let front = Lfcc::new(lfcc)?;
    let len = lfcc.samples_for_frames(cfg.frames);
    let mut renderer = Renderer {
        base: &cfg.base,
        sample_rate: lfcc.sample_rate as f64,
        len,
        fft_len: len.next_power_of_two(),
        planner: FftPlanner::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    for (t, spec) in cfg.tasks.iter().enumerate() {
        let id = t as u32 + 1;
        let mut split = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<FeatureMap>> {
            let mut out = Vec::with_capacity(count);
            for i in 0..count {
                // alternate classes so both are always present
                let (audio, label) = if i % 2 == 0 {
                    (renderer.bona_fide(rng), Label::Bonafide)
                } else {
                    let fam = cfg.family(&spec.families[(i / 2) % spec.families.len()]);
                    (renderer.spoof(fam, rng), Label::Spoof)
                };
                let wave = renderer.finish(audio, rng)?;
                out.push(FeatureMap::new(front.extract(&wave)?, label, id)?);
            }
            Ok(out)
        };
        let train = split(cfg.train_per_task, &mut rng)?;
        let eval = split(cfg.eval_per_task, &mut rng)?;
        tasks.push(Task {
            id,
            name: spec.families.join("+"),
            train,
            eval,
        });
    }
    let fingerprint = fingerprint_of(&serde_json::json!({
        "source": "synthetic",
        "generator": cfg,
        "lfcc": lfcc,
        "seed": seed,
    }));
    let stream = TaskStream { tasks, fingerprint };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_per_task: 6,
            eval_per_task: 4,
            frames: 4,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_from_seed() {
        let lfcc = LfccConfig::default();
        let a = synth_task_stream(&small(), &lfcc, 3).unwrap();
        let b = synth_task_stream(&small(), &lfcc, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_task_stream(&small(), &lfcc, 4).unwrap();
        assert_ne!(a.tasks[0].train, c.tasks[0].train);
        assert_ne!(a.fingerprint, c.fingerprint);
    }

    #[test]
    fn unknown_family_rejected() {
        let mut cfg = small();
        cfg.tasks[0].families.push("A9".into());
        assert!(synth_task_stream(&cfg, &LfccConfig::default(), 1).is_err());
    }

    #[test]
    fn empty_task_rejected() {
        let mut cfg = small();
        cfg.tasks[1].families.clear();
        assert!(cfg.validate(16_000).is_err());
    }
}
