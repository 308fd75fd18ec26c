use cade_core::autodiff::{Graph, OpKind, Tensor, Var};
use cade_core::continual::{ad_loss, kd_term};
use cade_core::features::{
    linear_filterbank, quantize_pcm16, read_wav_pcm16, synth_task_stream, write_wav_pcm16, LfccConfig, SynthConfig,
};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// A small smooth scalar function of `x` built from several primitives.
fn f(g: &mut Graph, x: Var) -> Var {
    let s = g.apply(OpKind::Sigmoid, &[x]).unwrap();
    let p = g.mul(s, x).unwrap();
    let n = g.apply(OpKind::L2Norm, &[p]).unwrap();
    g.sum(n).unwrap()
}

fn h(g: &mut Graph, x: Var) -> Var {
    let t = g.apply(OpKind::LogSigmoid, &[x]).unwrap();
    let c = g.apply(OpKind::CosineSimilarity, &[t, x]).unwrap();
    g.mean(c).unwrap()
}

fn grad_of(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.param("x", x.clone());
    let root = build(&mut g, v);
    g.backward(root).unwrap().remove("x").unwrap()
}

proptest! {
    #[test]
    fn backward_is_linear(x in tensor(vec![3, 4]), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let combined = grad_of(&x, |g, v| {
            let fa = f(g, v);
            let fa = g.scale(fa, a).unwrap();
            let hb = h(g, v);
            let hb = g.scale(hb, b).unwrap();
            g.add(fa, hb).unwrap()
        });
        let gf = grad_of(&x, f);
        let gh = grad_of(&x, h);
        for i in 0..x.numel() {
            let want = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((combined.data()[i] - want).abs() <= 1e-12, "{} vs {want}", combined.data()[i]);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(x in tensor(vec![1, 2, 5, 5]), k in tensor(vec![2, 2, 3, 3])) {
        let run = || {
            let mut g = Graph::new();
            let xv = g.param("x", x.clone());
            let kv = g.param("k", k.clone());
            let c = g.apply(OpKind::Conv2d { stride: [1, 1], padding: [1, 1] }, &[xv, kv]).unwrap();
            let p = g.apply(OpKind::MaxPool2d { window: [2, 2], stride: [2, 2] }, &[c]).unwrap();
            let s = g.sum(p).unwrap();
            (g.value(p).clone(), g.backward(s).unwrap())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        prop_assert_eq!(v1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        v2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn wav_round_trip(pcm in prop::collection::vec(any::<i16>(), 1..400), rate in 8000u32..48000) {
        let w = read_wav_pcm16(&write_wav_pcm16(&pcm, rate)).unwrap();
        prop_assert_eq!(w.sample_rate, rate);
        prop_assert_eq!(quantize_pcm16(&w.samples), pcm);
    }

    #[test]
    fn filterbank_covers_the_inner_band(n_filters in 1usize..40, log_fft in 7u32..11, rate in prop::sample::select(vec![8000u32, 16000, 22050])) {
        let fft = 1usize << log_fft;
        let fb = linear_filterbank(n_filters, fft, rate);
        prop_assert_eq!(fb.len(), n_filters);
        for row in &fb {
            prop_assert!(row.iter().sum::<f64>() > 0.0);
        }
        let nyq = rate as f64 / 2.0;
        let first = nyq / (n_filters + 1) as f64;
        let last = n_filters as f64 * first;
        for k in 0..fft / 2 + 1 {
            let f = k as f64 * rate as f64 / fft as f64;
            if f >= first && f <= last {
                prop_assert!(fb.iter().any(|row| row[k] > 0.0), "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn kd_pushes_student_toward_confident_teacher(y in prop::collection::vec(-4.0f64..4.0, 2), s in prop::collection::vec(-4.0f64..4.0, 2)) {
        let teacher = Tensor::new(vec![1, 2], y.clone()).unwrap();
        let grad = grad_of(&Tensor::new(vec![1, 2], s.clone()).unwrap(), |g, v| kd_term(g, &teacher, v).unwrap());
        for i in 0..2 {
            // d/dŝ of −σ(y)·ln σ(ŝ) is −σ(y)·(1 − σ(ŝ)): always negative
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let want = -sig(y[i]) * (1.0 - sig(s[i]));
            prop_assert!(grad.data()[i] < 0.0);
            prop_assert!((grad.data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn ad_ignores_power_of_two_scaling(t in prop::collection::vec(-5.0f64..5.0, 6), s in prop::collection::vec(-5.0f64..5.0, 6), e in -8i32..8) {
        let c = 2f64.powi(e);
        let scaled: Vec<f64> = t.iter().map(|v| v * c).collect();
        prop_assert_eq!(ad_loss(&scaled, &s).unwrap(), ad_loss(&t, &s).unwrap());
    }
}

#[test]
fn stream_is_a_function_of_config_and_seed() {
    let cfg = SynthConfig {
        train_per_task: 8,
        eval_per_task: 6,
        frames: 4,
        ..Default::default()
    };
    let lfcc = LfccConfig::default();
    let a = synth_task_stream(&cfg, &lfcc, 4).unwrap();
    let b = synth_task_stream(&cfg, &lfcc, 4).unwrap();
    let c = synth_task_stream(&cfg, &lfcc, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.fingerprint, c.fingerprint);
    assert_eq!(a.setting_name(), "A1+A2 TO A3+A4 TO A5+A6");
}
