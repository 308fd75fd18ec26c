//! Continual learning for bona fide vs. spoofed audio classification.

pub mod autodiff;
pub mod continual;
pub mod error;
pub mod features;
pub mod model;
pub mod train;

pub use error::{Error, Result};
