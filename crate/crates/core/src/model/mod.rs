//! The convolutional spoofing classifier, its Grad-CAM maps and checkpoints.

mod checkpoint;
mod config;
mod gradcam;
mod net;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Activation, ConvBlock, Geometry, Head, ModelConfig, TapPoint, CLASSES};
pub use gradcam::{channel_weights, gradcam, gradcam_batch, selected_logit_sum, weighted_map, AttentionMap};
pub use net::{ForwardOutput, ForwardVars, Model, ModelSnapshot, TapSet};

/// Shorthand for [`Model::init`].
pub fn init_model(cfg: &ModelConfig, seed: u64) -> crate::Result<Model> {
    Model::init(cfg, seed)
}
