use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{optimizer_step, Graph, OptimizerConfig, OptimizerState, Tensor};
use crate::continual::{
    estimate_fisher, mas_importance, method_objective, BufferStrategy, ImportanceKind, ImportanceMap, MemoryBuffer,
    MethodSpec, ObjectiveContext, TeacherOutputs,
};
use crate::error::{Error, Result};
use crate::features::{batch_input, fingerprint_of, FeatureMap, TaskStream};
use crate::model::{
    channel_weights, gradcam_batch, selected_logit_sum, weighted_map, Model, ModelConfig, ModelSnapshot,
};
use crate::train::eer::{eer, ScoreSet};
use crate::train::report::RunReport;

/// One training run: a method applied to a task stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Replay buffer capacity (ignored by methods without a buffer).
    pub memory: usize,
    pub buffer_strategy: BufferStrategy,
    /// Buffer draws per new sample in a replay batch.
    pub replay_ratio: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: MethodSpec::Finetune,
            epochs: 2,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            memory: 500,
            buffer_strategy: BufferStrategy::FixedRandom,
            replay_ratio: 1.0,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.optimizer.validate()?;
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !self.replay_ratio.is_finite() || self.replay_ratio < 0.0 {
            return Err(Error::Config(format!(
                "replay_ratio {} must be >= 0",
                self.replay_ratio
            )));
        }
        if self.method.uses_buffer() && self.memory == 0 {
            return Err(Error::Config(format!(
                "method `{}` replays from a buffer but memory is 0",
                self.method.id()
            )));
        }
        Ok(())
    }

    /// Buffer capacity actually used: 0 for methods without a buffer.
    pub fn effective_memory(&self) -> usize {
        if self.method.uses_buffer() {
            self.memory
        } else {
            0
        }
    }

    /// Content hash of this config together with the stream it runs on.
    pub fn hash(&self, stream_fingerprint: &str) -> String {
        fingerprint_of(&serde_json::json!({ "run": self, "stream": stream_fingerprint }))
    }
}

/// Hooks into a run; every method defaults to doing nothing.
pub trait RunObserver {
    fn teacher_frozen(&mut self, _task: u32, _checksum: &str) {}
    fn teacher_forward(&mut self, _task: u32) {}
    fn buffer_sampled(&mut self, _task: u32, _n: usize) {}
    fn buffer_filled(&mut self, _task: u32, _len: usize) {}
    /// Called after every optimizer step. The teacher checksum is only
    /// computed when [`RunObserver::wants_teacher_checksums`] is true.
    fn step(&mut self, _task: u32, _step: usize, _loss: f64, _teacher_checksum: Option<&str>) {}
    fn wants_teacher_checksums(&self) -> bool {
        false
    }
    /// EER on every seen task after finishing `task`.
    fn task_done(&mut self, _task: u32, _eers: &[f64]) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl RunObserver for NoObserver {}

/// Logit gap `bona fide − spoof` for every sample, in order.
pub fn evaluate(m: &Model, eval: &[FeatureMap]) -> Result<ScoreSet> {
    if eval.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let mut scores = Vec::with_capacity(eval.len());
    for chunk in eval.chunks(256) {
        let refs: Vec<&FeatureMap> = chunk.iter().collect();
        let logits = m.logits(&batch_input(&refs)?)?;
        scores.extend(logits.data().chunks(2).map(|r| r[1] - r[0]));
    }
    ScoreSet::new(scores, eval.iter().map(|m| m.label).collect())
}

/// Independent random streams derived from the run seed.
struct Streams {
    shuffle: ChaCha8Rng,
    buffer: ChaCha8Rng,
    importance: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            shuffle: stream(1),
            buffer: stream(2),
            importance: stream(3),
        }
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: Model,
    streams: Streams,
    buffer: MemoryBuffer,
    importance: Option<ImportanceMap>,
    steps: usize,
    observer: &'a mut dyn RunObserver,
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits.data().chunks(2).map(|r| usize::from(r[1] > r[0])).collect()
}

impl Trainer<'_> {
    fn train_task(
        &mut self,
        task_id: u32,
        data: &[FeatureMap],
        first: bool,
        teacher: Option<&ModelSnapshot>,
    ) -> Result<()> {
        let mut opt = OptimizerState::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let replay = self.cfg.method.uses_buffer() && !self.buffer.is_empty();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.streams.shuffle);
            for chunk in order.chunks(self.cfg.batch_size) {
                let mut batch: Vec<&FeatureMap> = chunk.iter().map(|&i| &data[i]).collect();
                let mut drawn = Vec::new();
                if replay {
                    let n = (chunk.len() as f64 * self.cfg.replay_ratio).round() as usize;
                    if n > 0 {
                        drawn = self
                            .buffer
                            .sample(n, &mut self.streams.buffer)?
                            .into_iter()
                            .cloned()
                            .collect();
                        self.observer.buffer_sampled(task_id, n);
                    }
                }
                batch.extend(drawn.iter());
                self.step(task_id, &batch, first, teacher, &mut opt)?;
            }
        }
        Ok(())
    }

    fn step(
        &mut self,
        task_id: u32,
        batch: &[&FeatureMap],
        first: bool,
        teacher: Option<&ModelSnapshot>,
        opt: &mut OptimizerState,
    ) -> Result<()> {
        let input = batch_input(batch)?;
        let labels: Vec<usize> = batch.iter().map(|m| m.label.index()).collect();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fv = self.model.build(&mut g, x, true, None)?;
        let mut student_cam = None;
        let teacher_out = match teacher {
            Some(t) if self.cfg.method.uses_teacher() => {
                self.observer.teacher_forward(task_id);
                let out = t.model().forward_with_taps(&input)?;
                let cam = if self.cfg.method.uses_attention() {
                    // both maps at the class the student currently predicts
                    let classes = argmax_rows(g.value(fv.logits));
                    let layer = self.cfg.model.gradcam_block().expect("validated model has blocks");
                    let act = fv.block_act(layer)?;
                    let root = selected_logit_sum(&mut g, fv.logits, &classes)?;
                    let w = channel_weights(&g, root, act)?;
                    student_cam = Some(weighted_map(&mut g, act, w, self.cfg.model.gradcam_relu)?);
                    Some(gradcam_batch(t.model(), &input, &classes, &self.cfg.model)?)
                } else {
                    None
                };
                Some(TeacherOutputs {
                    logits: out.logits,
                    taps: out.taps.entries.into_iter().map(|(_, v)| v).collect(),
                    cam,
                })
            }
            _ => None,
        };
        let ctx = ObjectiveContext {
            labels: &labels,
            student: &fv,
            student_cam,
            teacher: teacher_out.as_ref(),
            importance: self.importance.as_ref(),
            params: self.model.params(),
            first_task: first,
        };
        let obj = method_objective(&mut g, &self.cfg.method, &ctx)?;
        let loss = g.value(obj.total).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                value: loss,
            });
        }
        let grads = g.backward(obj.total)?;
        drop(g);
        self.model.params_mut().set_grads(grads)?;
        optimizer_step(self.model.params_mut(), &self.cfg.optimizer, opt)?;
        self.steps += 1;
        let checksum = match teacher {
            Some(t) if self.observer.wants_teacher_checksums() => Some(t.checksum()),
            _ => None,
        };
        self.observer.step(task_id, self.steps, loss, checksum.as_deref());
        Ok(())
    }

    fn consolidate(&mut self, task_id: u32, data: &[FeatureMap]) -> Result<()> {
        if self.cfg.method.uses_buffer() {
            let model = &self.model;
            let embed = |ms: &[&FeatureMap]| -> Result<Vec<Vec<f64>>> {
                let mut out = Vec::with_capacity(ms.len());
                for chunk in ms.chunks(256) {
                    let f = model.forward_with_taps(&batch_input(chunk)?)?;
                    let (_, last) = f.taps.last().expect("validated tap list");
                    let width = last.numel() / chunk.len();
                    out.extend(last.data().chunks(width).map(<[f64]>::to_vec));
                }
                Ok(out)
            };
            self.buffer
                .insert_task(task_id, data, &mut self.streams.buffer, Some(&embed))?;
            self.observer.buffer_filled(task_id, self.buffer.len());
        }
        if let Some((kind, _, samples)) = self.cfg.method.importance() {
            let rng = &mut self.streams.importance;
            let next = match kind {
                ImportanceKind::Fisher(mode) => estimate_fisher(&self.model, data, samples, mode, rng)?,
                ImportanceKind::Mas => mas_importance(&self.model, data, samples, rng)?,
            };
            match self.importance.as_mut() {
                Some(acc) => acc.accumulate(next)?,
                None => self.importance = Some(next),
            }
        }
        Ok(())
    }
}

/// Trains `cfg.method` over the tasks of `stream` in order and evaluates
/// after every task.
pub fn run_sequential(cfg: &RunConfig, stream: &TaskStream, observer: &mut dyn RunObserver) -> Result<RunReport> {
    Ok(train_and_report(cfg, stream, observer)?.0)
}

/// Like [`run_sequential`], also returning the final model.
pub fn train_and_report(
    cfg: &RunConfig,
    stream: &TaskStream,
    observer: &mut dyn RunObserver,
) -> Result<(RunReport, Model)> {
    let start = Instant::now();
    cfg.validate()?;
    stream.validate()?;
    let dims = stream.input_dims().expect("validated stream");
    if dims != (cfg.model.input[0], cfg.model.input[1]) {
        return Err(Error::Config(format!(
            "model input {:?} does not match the stream's {}x{} feature maps",
            cfg.model.input, dims.0, dims.1
        )));
    }
    let mut t = Trainer {
        cfg,
        model: Model::init(&cfg.model, cfg.seed)?,
        streams: Streams::new(cfg.seed),
        buffer: MemoryBuffer::new(cfg.effective_memory(), cfg.buffer_strategy),
        importance: None,
        steps: 0,
        observer,
    };
    let mut per_task_eer = Vec::new();
    if cfg.method == MethodSpec::Joint {
        let union: Vec<FeatureMap> = stream.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
        let last = stream.tasks.last().expect("validated stream").id;
        t.train_task(last, &union, true, None)?;
        let row = stream
            .tasks
            .iter()
            .map(|task| eer(&evaluate(&t.model, &task.eval)?))
            .collect::<Result<Vec<_>>>()?;
        t.observer.task_done(last, &row);
        per_task_eer.push(row);
    } else {
        for (i, task) in stream.tasks.iter().enumerate() {
            let teacher = if i > 0 && cfg.method.uses_teacher() {
                let snap = t.model.snapshot();
                t.observer.teacher_frozen(task.id, &snap.checksum());
                Some(snap)
            } else {
                None
            };
            t.train_task(task.id, &task.train, i == 0, teacher.as_ref())?;
            t.consolidate(task.id, &task.train)?;
            let row = stream.tasks[..=i]
                .iter()
                .map(|seen| eer(&evaluate(&t.model, &seen.eval)?))
                .collect::<Result<Vec<_>>>()?;
            t.observer.task_done(task.id, &row);
            per_task_eer.push(row);
        }
    }
    let pooled = ScoreSet::merge(
        &stream
            .tasks
            .iter()
            .map(|task| evaluate(&t.model, &task.eval))
            .collect::<Result<Vec<_>>>()?,
    );
    let report = RunReport {
        method: cfg.method.id().to_string(),
        memory: cfg.effective_memory(),
        seed: cfg.seed,
        per_task_eer,
        final_eer: eer(&pooled)?,
        config_hash: cfg.hash(&stream.fingerprint),
        stream: stream.fingerprint.clone(),
        setting: stream.setting_name(),
        steps: t.steps,
        model_checksum: t.model.params().checksum(),
        wall_ms: start.elapsed().as_millis() as u64,
        config: cfg.clone(),
    };
    Ok((report, t.model))
}
