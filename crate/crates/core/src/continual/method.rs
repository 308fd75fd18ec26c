use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterStore, Tensor, Var};
use crate::continual::importance::{penalty_term, FisherMode, ImportanceMap};
use crate::continual::losses::{ad_term, add_weighted, classification_term, kd_term, psa_term, LossWeights};
use crate::error::{Error, Result};
use crate::model::ForwardVars;

fn default_lambda() -> f64 {
    100.0
}

fn default_importance_samples() -> usize {
    200
}

fn default_alpha() -> f64 {
    LossWeights::default().alpha
}

fn default_beta() -> f64 {
    LossWeights::default().beta
}

fn default_gamma() -> f64 {
    LossWeights::default().gamma
}

/// A training method and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodSpec {
    /// Classification loss on each new task only.
    Finetune,
    /// One model trained on the union of every task.
    Joint,
    /// Classification loss over new data mixed with buffer draws.
    Replay,
    Ewc {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        fisher: FisherMode,
        #[serde(default = "default_importance_samples")]
        samples: usize,
        /// Also mix buffer draws into each batch.
        #[serde(default)]
        replay: bool,
    },
    Mas {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_importance_samples")]
        samples: usize,
        #[serde(default)]
        replay: bool,
    },
    Lwf {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        replay: bool,
    },
    Dfwf {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        replay: bool,
    },
    Cade {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

/// Which importance estimate a method consolidates after each task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImportanceKind {
    Fisher(FisherMode),
    Mas,
}

impl MethodSpec {
    pub fn cade(w: LossWeights) -> Self {
        MethodSpec::Cade {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        }
    }

    /// Lower-case identifier used in configs and result records.
    pub fn id(&self) -> &'static str {
        match self {
            MethodSpec::Finetune => "finetune",
            MethodSpec::Joint => "joint",
            MethodSpec::Replay => "replay",
            MethodSpec::Ewc { .. } => "ewc",
            MethodSpec::Mas { .. } => "mas",
            MethodSpec::Lwf { .. } => "lwf",
            MethodSpec::Dfwf { .. } => "dfwf",
            MethodSpec::Cade { .. } => "cade",
        }
    }

    /// Name as printed in result tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            MethodSpec::Finetune => "Finetune",
            MethodSpec::Joint => "Joint",
            MethodSpec::Replay => "Replay",
            MethodSpec::Ewc { .. } => "EWC",
            MethodSpec::Mas { .. } => "MAS",
            MethodSpec::Lwf { .. } => "LWF",
            MethodSpec::Dfwf { .. } => "DFWF",
            MethodSpec::Cade { .. } => "CADE",
        }
    }

    /// Position in result tables: Joint first, CADE last.
    pub fn table_rank(&self) -> usize {
        match self {
            MethodSpec::Joint => 0,
            MethodSpec::Finetune => 1,
            MethodSpec::Ewc { .. } => 2,
            MethodSpec::Lwf { .. } => 3,
            MethodSpec::Mas { .. } => 4,
            MethodSpec::Replay => 5,
            MethodSpec::Dfwf { .. } => 6,
            MethodSpec::Cade { .. } => 7,
        }
    }

    pub fn weights(&self) -> LossWeights {
        match *self {
            MethodSpec::Lwf { alpha, .. } => LossWeights {
                alpha,
                beta: 0.0,
                gamma: 0.0,
            },
            MethodSpec::Dfwf { alpha, gamma, .. } => LossWeights {
                alpha,
                beta: 0.0,
                gamma,
            },
            MethodSpec::Cade { alpha, beta, gamma } => LossWeights { alpha, beta, gamma },
            _ => LossWeights {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
            },
        }
    }

    pub fn uses_buffer(&self) -> bool {
        match self {
            MethodSpec::Replay | MethodSpec::Cade { .. } => true,
            MethodSpec::Ewc { replay, .. }
            | MethodSpec::Mas { replay, .. }
            | MethodSpec::Lwf { replay, .. }
            | MethodSpec::Dfwf { replay, .. } => *replay,
            MethodSpec::Finetune | MethodSpec::Joint => false,
        }
    }

    /// Whether a frozen copy of the previous model feeds the loss.
    pub fn uses_teacher(&self) -> bool {
        matches!(
            self,
            MethodSpec::Lwf { .. } | MethodSpec::Dfwf { .. } | MethodSpec::Cade { .. }
        ) && !self.weights().is_zero()
    }

    /// Whether the loss needs Grad-CAM maps.
    pub fn uses_attention(&self) -> bool {
        matches!(self, MethodSpec::Cade { beta, .. } if *beta != 0.0)
    }

    pub fn importance(&self) -> Option<(ImportanceKind, f64, usize)> {
        match *self {
            MethodSpec::Ewc {
                lambda,
                fisher,
                samples,
                ..
            } => Some((ImportanceKind::Fisher(fisher), lambda, samples)),
            MethodSpec::Mas { lambda, samples, .. } => Some((ImportanceKind::Mas, lambda, samples)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights()
            .validate()
            .map_err(|e| Error::Config(format!("{}: {e}", self.id())))?;
        if let Some((_, lambda, samples)) = self.importance() {
            if !lambda.is_finite() || lambda < 0.0 {
                return Err(Error::Config(format!("{}: lambda must be finite and >= 0", self.id())));
            }
            if samples == 0 {
                return Err(Error::Config(format!("{}: samples must be positive", self.id())));
            }
        }
        Ok(())
    }
}

/// Frozen-teacher quantities for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    /// `[N, 2]`
    pub logits: Tensor,
    /// One `[N, D]` tensor per tap, in config order.
    pub taps: Vec<Tensor>,
    /// `[N, l]` Grad-CAM maps at the student's predicted classes.
    pub cam: Option<Tensor>,
}

/// Everything a method's loss may draw on for one batch.
pub struct ObjectiveContext<'a> {
    pub labels: &'a [usize],
    /// Student forward pass recorded on the graph.
    pub student: &'a ForwardVars,
    /// Student Grad-CAM maps `[N, l]` on the graph.
    pub student_cam: Option<Var>,
    pub teacher: Option<&'a TeacherOutputs>,
    /// Accumulated importance from earlier tasks.
    pub importance: Option<&'a ImportanceMap>,
    pub params: &'a ParameterStore,
    /// No earlier task exists, so there is nothing to preserve.
    pub first_task: bool,
}

/// The scalar loss and its recorded components.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub classification: Var,
    pub kd: Option<Var>,
    pub ad: Option<Var>,
    pub psa: Option<Var>,
    pub penalty: Option<Var>,
}

/// Builds the training loss of `spec` on `g`.
pub fn method_objective(g: &mut Graph, spec: &MethodSpec, ctx: &ObjectiveContext<'_>) -> Result<Objective> {
    let lc = classification_term(g, ctx.student.logits, ctx.labels)?;
    let mut obj = Objective {
        total: lc,
        classification: lc,
        kd: None,
        ad: None,
        psa: None,
        penalty: None,
    };
    if ctx.first_task {
        return Ok(obj);
    }
    if let Some((_, lambda, _)) = spec.importance() {
        let imp = ctx
            .importance
            .ok_or_else(|| Error::Invalid(format!("{} after the first task needs importance weights", spec.id())))?;
        if lambda != 0.0 {
            let p = penalty_term(g, ctx.params, imp, lambda)?;
            obj.penalty = Some(p);
            obj.total = g.add(obj.total, p)?;
        }
        return Ok(obj);
    }
    if !spec.uses_teacher() {
        return Ok(obj);
    }
    let teacher = ctx
        .teacher
        .ok_or_else(|| Error::MissingTeacher(spec.id().to_string()))?;
    let w = spec.weights();
    if w.alpha != 0.0 {
        obj.kd = Some(kd_term(g, &teacher.logits, ctx.student.logits)?);
    }
    if w.beta != 0.0 {
        let (Some(t), Some(s)) = (teacher.cam.as_ref(), ctx.student_cam) else {
            return Err(Error::Invalid(format!(
                "{} needs attention maps for both models",
                spec.id()
            )));
        };
        obj.ad = Some(ad_term(g, t, s)?);
    }
    if w.gamma != 0.0 {
        let positive: Vec<bool> = ctx
            .labels
            .iter()
            .map(|&l| l == crate::features::Label::Bonafide.index())
            .collect();
        let student_taps: Vec<Var> = ctx.student.taps.iter().map(|(_, v)| *v).collect();
        let (t, s) = match spec {
            // only the last tap (the embedding fed to the output layer)
            MethodSpec::Dfwf { .. } => (
                &teacher.taps[teacher.taps.len().saturating_sub(1)..],
                &student_taps[student_taps.len().saturating_sub(1)..],
            ),
            _ => (&teacher.taps[..], &student_taps[..]),
        };
        obj.psa = Some(psa_term(g, t, s, &positive)?);
    }
    obj.total = add_weighted(g, obj.total, obj.kd, w.alpha)?;
    obj.total = add_weighted(g, obj.total, obj.ad, w.beta)?;
    obj.total = add_weighted(g, obj.total, obj.psa, w.gamma)?;
    Ok(obj)
}
