use std::collections::BTreeMap;
use std::sync::OnceLock;

use cade_core::autodiff::{OptimizerConfig, Tensor};
use cade_core::continual::{LossWeights, MethodSpec};
use cade_core::features::{synth_task_stream, FeatureMap, Label, LfccConfig, SynthConfig, TaskStream};
use cade_core::model::{ConvBlock, Head, Model, ModelConfig, TapPoint};
use cade_core::train::{evaluate, run_sequential, train_and_report, NoObserver, RunConfig, RunObserver};
use cade_core::Error;

fn small_stream() -> &'static TaskStream {
    static S: OnceLock<TaskStream> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = SynthConfig {
            train_per_task: 48,
            eval_per_task: 24,
            frames: 8,
            ..Default::default()
        };
        synth_task_stream(&cfg, &LfccConfig::default(), 3).unwrap()
    })
}

fn small_model() -> ModelConfig {
    let block = |c| ConvBlock {
        out_channels: c,
        kernel: [3, 3],
        pool: [2, 2],
    };
    ModelConfig {
        input: [20, 8],
        blocks: vec![block(3), block(4)],
        hidden: 8,
        taps: vec![TapPoint::Block(0), TapPoint::Block(1), TapPoint::Embedding],
        ..Default::default()
    }
}

fn run_cfg(method: MethodSpec) -> RunConfig {
    RunConfig {
        method,
        epochs: 1,
        batch_size: 16,
        memory: 30,
        seed: 7,
        model: small_model(),
        ..Default::default()
    }
}

fn all_methods() -> Vec<MethodSpec> {
    let json = r#"[
        {"name": "joint"}, {"name": "finetune"}, {"name": "replay"},
        {"name": "ewc", "samples": 8}, {"name": "mas", "samples": 8, "replay": true},
        {"name": "lwf"}, {"name": "dfwf", "replay": true}, {"name": "cade", "beta": 0.5}
    ]"#;
    serde_json::from_str(json).unwrap()
}

#[test]
fn repeated_runs_are_identical() {
    for m in all_methods() {
        let cfg = run_cfg(m);
        let a = run_sequential(&cfg, small_stream(), &mut NoObserver).unwrap();
        let b = run_sequential(&cfg, small_stream(), &mut NoObserver).unwrap();
        assert_eq!(a.without_timing(), b.without_timing(), "{}", cfg.method.id());
        assert_eq!(a.without_timing().to_json_line(), b.without_timing().to_json_line());
    }
}

#[test]
fn seeds_change_the_outcome() {
    let mut cfg = run_cfg(MethodSpec::Finetune);
    let a = run_sequential(&cfg, small_stream(), &mut NoObserver).unwrap();
    cfg.seed = 8;
    let b = run_sequential(&cfg, small_stream(), &mut NoObserver).unwrap();
    assert_ne!(a.model_checksum, b.model_checksum);
    assert_ne!(a.config_hash, b.config_hash);
}

#[derive(Default)]
struct Recorder {
    frozen: BTreeMap<u32, String>,
    checksums: BTreeMap<u32, Vec<String>>,
    teacher_forwards: usize,
    sampled: usize,
    filled: Vec<(u32, usize)>,
    steps: Vec<usize>,
    done: Vec<(u32, usize)>,
}

impl RunObserver for Recorder {
    fn teacher_frozen(&mut self, task: u32, checksum: &str) {
        self.frozen.insert(task, checksum.to_string());
    }
    fn teacher_forward(&mut self, _task: u32) {
        self.teacher_forwards += 1;
    }
    fn buffer_sampled(&mut self, _task: u32, n: usize) {
        self.sampled += n;
    }
    fn buffer_filled(&mut self, task: u32, len: usize) {
        self.filled.push((task, len));
    }
    fn step(&mut self, task: u32, step: usize, loss: f64, teacher: Option<&str>) {
        assert!(loss.is_finite());
        self.steps.push(step);
        if let Some(c) = teacher {
            self.checksums.entry(task).or_default().push(c.to_string());
        }
    }
    fn wants_teacher_checksums(&self) -> bool {
        true
    }
    fn task_done(&mut self, task: u32, eers: &[f64]) {
        self.done.push((task, eers.len()));
    }
}

#[test]
fn teacher_is_frozen_within_each_task() {
    for m in [
        MethodSpec::cade(LossWeights::default()),
        MethodSpec::Lwf {
            alpha: 1.0,
            replay: false,
        },
    ] {
        let mut rec = Recorder::default();
        run_sequential(&run_cfg(m), small_stream(), &mut rec).unwrap();
        let ids: Vec<u32> = small_stream().tasks.iter().map(|t| t.id).collect();
        assert_eq!(rec.frozen.keys().copied().collect::<Vec<_>>(), ids[1..]);
        for (task, sums) in &rec.checksums {
            assert!(!sums.is_empty());
            assert!(
                sums.iter().all(|c| c == &rec.frozen[task]),
                "task {task}: teacher changed mid-task"
            );
        }
        assert_ne!(rec.frozen[&ids[1]], rec.frozen[&ids[2]]);
        assert!(rec.teacher_forwards > 0);
    }
}

#[test]
fn joint_uses_neither_buffer_nor_teacher() {
    let mut rec = Recorder::default();
    let r = run_sequential(&run_cfg(MethodSpec::Joint), small_stream(), &mut rec).unwrap();
    assert_eq!(rec.sampled, 0);
    assert_eq!(rec.teacher_forwards, 0);
    assert!(rec.frozen.is_empty() && rec.filled.is_empty());
    assert_eq!(r.per_task_eer.len(), 1);
    assert_eq!(r.per_task_eer[0].len(), 3);
    assert_eq!(r.memory, 0);
}

#[test]
fn replay_fills_and_draws_from_the_buffer() {
    let mut rec = Recorder::default();
    let r = run_sequential(&run_cfg(MethodSpec::Replay), small_stream(), &mut rec).unwrap();
    assert_eq!(rec.filled.iter().map(|f| f.1).collect::<Vec<_>>(), [30, 30, 30]);
    // one draw per new sample on tasks two and three
    assert_eq!(rec.sampled, 2 * 48);
    assert_eq!(rec.steps, (1..=r.steps).collect::<Vec<_>>());
    assert_eq!(rec.done, [(1, 1), (2, 2), (3, 3)]);
    assert_eq!(r.per_task_eer.iter().map(Vec::len).collect::<Vec<_>>(), [1, 2, 3]);
}

#[test]
fn zero_weight_cade_is_replay() {
    let zero = MethodSpec::cade(LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    });
    let a = run_sequential(&run_cfg(zero), small_stream(), &mut NoObserver).unwrap();
    let b = run_sequential(&run_cfg(MethodSpec::Replay), small_stream(), &mut NoObserver).unwrap();
    assert_eq!(a.model_checksum, b.model_checksum);
    assert_eq!(a.per_task_eer, b.per_task_eer);
}

#[test]
fn first_task_ignores_distillation_weights() {
    let one = TaskStream {
        tasks: small_stream().tasks[..1].to_vec(),
        fingerprint: "one".into(),
    };
    let cade = run_sequential(
        &run_cfg(MethodSpec::cade(LossWeights::default())),
        &one,
        &mut NoObserver,
    )
    .unwrap();
    let ft = run_sequential(&run_cfg(MethodSpec::Finetune), &one, &mut NoObserver).unwrap();
    assert_eq!(cade.model_checksum, ft.model_checksum);
    assert_eq!(cade.final_eer, ft.final_eer);
}

#[test]
fn evaluation_is_pure() {
    let m = Model::init(&small_model(), 1).unwrap();
    let before = m.params().checksum();
    let eval = &small_stream().tasks[0].eval;
    let a = evaluate(&m, eval).unwrap();
    let b = evaluate(&m, eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.params().checksum(), before);
    assert!(evaluate(&m, &[]).is_err());
}

#[test]
fn zero_model_scores_zero() {
    let mut m = Model::init(&small_model(), 1).unwrap();
    let names: Vec<String> = m.params().names().map(String::from).collect();
    for n in names {
        let shape = m.params().get(&n).unwrap().shape().to_vec();
        m.set_param(&n, Tensor::zeros(&shape)).unwrap();
    }
    let s = evaluate(&m, &small_stream().tasks[1].eval).unwrap();
    assert!(s.scores.iter().all(|&v| v == 0.0));
}

#[test]
fn hand_computed_linear_scores() {
    let cfg = ModelConfig {
        input: [1, 2],
        blocks: vec![],
        head: Head::Flatten,
        hidden: 0,
        taps: vec![TapPoint::Embedding],
        ..Default::default()
    };
    let mut m = Model::init(&cfg, 0).unwrap();
    // logits = x · W + b with W = [[1, 2], [3, -1]], b = [0.5, -0.5]
    m.set_param(
        "out.weight",
        Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap(),
    )
    .unwrap();
    m.set_param("out.bias", Tensor::vector(vec![0.5, -0.5])).unwrap();
    let map = |a: f64, b: f64, label| FeatureMap {
        frames: 2,
        n_coeffs: 1,
        values: vec![a, b],
        label,
        task_id: 0,
    };
    let s = evaluate(&m, &[map(1.0, 0.0, Label::Bonafide), map(0.0, 2.0, Label::Spoof)]).unwrap();
    // (2 − 0.5) − (1 + 0.5) = 0 and (−2 − 0.5) − (6 + 0.5) = −9
    assert_eq!(s.scores, [0.0, -9.0]);
    assert_eq!(s.labels, [Label::Bonafide, Label::Spoof]);
}

#[test]
fn finetuning_forgets_the_first_task() {
    let cfg = SynthConfig {
        train_per_task: 300,
        eval_per_task: 100,
        frames: 16,
        ..Default::default()
    };
    let stream = synth_task_stream(&cfg, &LfccConfig::default(), 1).unwrap();
    let run = RunConfig {
        method: MethodSpec::Finetune,
        epochs: 3,
        model: ModelConfig {
            input: [20, 16],
            ..small_model()
        },
        ..Default::default()
    };
    let r = run_sequential(&run, &stream, &mut NoObserver).unwrap();
    let after_first = r.per_task_eer[0][0];
    let after_last = r.per_task_eer[2][0];
    assert!(after_last > after_first, "task 1 EER {after_first} -> {after_last}");
}

#[test]
fn mismatched_input_rejected() {
    let mut cfg = run_cfg(MethodSpec::Finetune);
    cfg.model.input = [20, 16];
    assert!(matches!(
        run_sequential(&cfg, small_stream(), &mut NoObserver),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_reports_the_step() {
    let mut cfg = run_cfg(MethodSpec::Finetune);
    cfg.optimizer = OptimizerConfig::Sgd {
        lr: 1e12,
        momentum: 0.0,
    };
    match train_and_report(&cfg, small_stream(), &mut NoObserver) {
        Err(Error::NonFiniteLoss { step, .. }) => assert!(step > 0),
        Err(Error::NonFinite(_)) => {}
        other => panic!("expected divergence, got {:?}", other.map(|r| r.0.final_eer)),
    }
}
