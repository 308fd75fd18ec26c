use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of output logits: spoof, bona fide.
pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    /// `[height, width]`; stride 1 with `(k - 1) / 2` zero padding.
    pub kernel: [usize; 2],
    /// Max-pool window (and stride); `[1, 1]` disables pooling.
    pub pool: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Flatten the last block's output.
    Flatten,
    /// Average each channel of the last block's output.
    GlobalAvgPool,
}

/// Where an embedding is read from.
///
/// Serialized as `"block<i>"` (output of conv block `i`, after pooling) or
/// `"embedding"` (input of the output layer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TapPoint {
    Block(usize),
    Embedding,
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapPoint::Block(i) => write!(f, "block{i}"),
            TapPoint::Embedding => write!(f, "embedding"),
        }
    }
}

impl TryFrom<String> for TapPoint {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "embedding" {
            return Ok(TapPoint::Embedding);
        }
        s.strip_prefix("block")
            .and_then(|i| i.parse().ok())
            .map(TapPoint::Block)
            .ok_or_else(|| format!("invalid tap point `{s}` (expected `block<i>` or `embedding`)"))
    }
}

impl From<TapPoint> for String {
    fn from(t: TapPoint) -> String {
        t.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `[n_coeffs, frames]` of the single-channel input.
    pub input: [usize; 2],
    pub blocks: Vec<ConvBlock>,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub head: Head,
    /// Width of the hidden dense layer; 0 connects the head straight to the logits.
    pub hidden: usize,
    pub taps: Vec<TapPoint>,
    /// Block whose activations feed Grad-CAM; `None` means the last block.
    pub gradcam_layer: Option<usize>,
    /// Apply ReLU to the channel-weighted sum.
    pub gradcam_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let block = |c| ConvBlock {
            out_channels: c,
            kernel: [3, 3],
            pool: [2, 2],
        };
        Self {
            input: [20, 32],
            blocks: vec![block(4), block(8), block(16)],
            activation: Activation::LeakyRelu,
            leaky_slope: 0.01,
            head: Head::Flatten,
            hidden: 64,
            taps: vec![
                TapPoint::Block(0),
                TapPoint::Block(1),
                TapPoint::Block(2),
                TapPoint::Embedding,
            ],
            gradcam_layer: None,
            gradcam_relu: true,
        }
    }
}

/// Shapes derived from a valid config.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    /// `[channels, h, w]` of each block's activation before pooling.
    pub activations: Vec<[usize; 3]>,
    /// `[channels, h, w]` of each block's output after pooling.
    pub outputs: Vec<[usize; 3]>,
    /// Width of the vector entering the hidden/output dense layers.
    pub features: usize,
    /// Width of the `Embedding` tap.
    pub embedding: usize,
}

impl ModelConfig {
    pub fn geometry(&self) -> Result<Geometry> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        let [mut h, mut w] = self.input;
        if h == 0 || w == 0 {
            return fail("input dimensions must be positive".into());
        }
        let mut c = 1;
        let mut activations = Vec::new();
        let mut outputs = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel.contains(&0) || b.pool.contains(&0) {
                return fail(format!("block {i} has a zero dimension"));
            }
            let [kh, kw] = b.kernel;
            let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
            if h + 2 * ph < kh || w + 2 * pw < kw {
                return fail(format!("block {i} kernel larger than its input {h}x{w}"));
            }
            h = h + 2 * ph - kh + 1;
            w = w + 2 * pw - kw + 1;
            c = b.out_channels;
            activations.push([c, h, w]);
            if h < b.pool[0] || w < b.pool[1] {
                return fail(format!("block {i} pool {:?} larger than its map {h}x{w}", b.pool));
            }
            h = (h - b.pool[0]) / b.pool[0] + 1;
            w = (w - b.pool[1]) / b.pool[1] + 1;
            outputs.push([c, h, w]);
        }
        let features = match self.head {
            Head::Flatten => c * h * w,
            Head::GlobalAvgPool => c,
        };
        Ok(Geometry {
            activations,
            outputs,
            features,
            embedding: if self.hidden > 0 { self.hidden } else { features },
        })
    }

    pub fn validate(&self) -> Result<Geometry> {
        let geo = self.geometry()?;
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope {} outside [0, 1)", self.leaky_slope));
        }
        if self.taps.is_empty() {
            return fail("tap list must not be empty".into());
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return fail("tap list must be strictly increasing".into());
        }
        for t in &self.taps {
            if let TapPoint::Block(i) = t {
                if *i >= self.blocks.len() {
                    return fail(format!("tap {t} refers to a missing block"));
                }
            }
        }
        if let Some(l) = self.gradcam_layer {
            if l >= self.blocks.len() {
                return fail(format!("gradcam_layer {l} but only {} blocks", self.blocks.len()));
            }
        }
        Ok(geo)
    }

    /// The Grad-CAM block, if the model has any conv block.
    pub fn gradcam_block(&self) -> Option<usize> {
        self.gradcam_layer.or_else(|| self.blocks.len().checked_sub(1))
    }
}
