//! Continual-learning machinery: the distillation losses, the replay buffer,
//! parameter-importance baselines and per-method objectives.

mod buffer;
mod importance;
mod losses;
mod method;

pub use buffer::{BufferStrategy, Embedder, MemoryBuffer};
pub use importance::{estimate_fisher, mas_importance, penalty_term, quadratic_penalty, FisherMode, ImportanceMap};
pub use losses::{
    ad_loss, ad_term, add_weighted, cade_loss, classification_loss, classification_term, kd_loss, kd_term, psa_loss,
    psa_similarity, psa_term, LossWeights,
};
pub use method::{method_objective, ImportanceKind, MethodSpec, Objective, ObjectiveContext, TeacherOutputs};
