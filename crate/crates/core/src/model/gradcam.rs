use crate::autodiff::{Graph, OpKind, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::config::CLASSES;
use crate::model::net::Model;

/// A vectorized class-activation map of length `h · w`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f64>,
    pub class: usize,
}

/// Scalar `Σ_n logits[n, classes[n]]`. Samples are independent, so its
/// gradient with respect to a per-sample activation is each sample's own
/// class-logit gradient.
pub fn selected_logit_sum(g: &mut Graph, logits: Var, classes: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != CLASSES || shape[0] != classes.len() {
        return Err(shape_err(
            "gradcam",
            format!("logits {shape:?} do not match {} class indices", classes.len()),
        ));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= CLASSES) {
        return Err(Error::Invalid(format!("class index {c} not in 0..{CLASSES}")));
    }
    let mut mask = vec![0.0; shape[0] * CLASSES];
    for (n, &c) in classes.iter().enumerate() {
        mask[n * CLASSES + c] = 1.0;
    }
    let mask = g.constant(Tensor::new(shape, mask)?);
    let picked = g.mul(logits, mask)?;
    g.sum(picked)
}

/// Channel weights `[N, C]`: the gradient of each sample's class logit with
/// respect to `act`, averaged over the spatial positions.
pub fn channel_weights(g: &Graph, root: Var, act: Var) -> Result<Tensor> {
    let grads = g.grad_wrt(root, &[act])?;
    let shape = g.value(act).shape().to_vec();
    let grad = grads.get(act).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
    crate::autodiff::eval_op(&OpKind::GlobalAvgPool, &[&grad])
}

/// Records the weighted sum of `act` under fixed `weights`, with an optional
/// ReLU, as `[N, h·w]`. Gradients flow through `act` only.
pub fn weighted_map(g: &mut Graph, act: Var, weights: Tensor, relu: bool) -> Result<Var> {
    let w = g.constant(weights);
    let sum = g.apply(OpKind::ChannelWeightedSum, &[act, w])?;
    if relu {
        g.apply(OpKind::Relu, &[sum])
    } else {
        Ok(sum)
    }
}

/// Grad-CAM for one sample (`[1, H, W]` or `[1, 1, H, W]`) at class `class`
/// and block `layer`.
pub fn gradcam(m: &Model, input: &Tensor, class: usize, layer: usize) -> Result<AttentionMap> {
    let cfg = m.config();
    if layer >= cfg.blocks.len() {
        return Err(Error::Invalid(format!(
            "gradcam layer {layer} but the model has {} blocks",
            cfg.blocks.len()
        )));
    }
    if class >= CLASSES {
        return Err(Error::Invalid(format!("class index {class} not in 0..{CLASSES}")));
    }
    let batch = match input.shape() {
        [1, h, w] => input.reshape(&[1, 1, *h, *w])?,
        [1, 1, _, _] => input.clone(),
        other => {
            return Err(shape_err("gradcam", format!("expected one sample, got {other:?}")));
        }
    };
    let cam_cfg = crate::model::ModelConfig {
        gradcam_layer: Some(layer),
        ..cfg.clone()
    };
    let maps = gradcam_batch(m, &batch, &[class], &cam_cfg)?;
    Ok(AttentionMap {
        values: maps.into_data(),
        class,
    })
}

/// Grad-CAM maps `[N, h·w]` for a batch, one class per sample, using the
/// layer and ReLU setting of `cam`.
pub fn gradcam_batch(m: &Model, batch: &Tensor, classes: &[usize], cam: &crate::model::ModelConfig) -> Result<Tensor> {
    let layer = cam
        .gradcam_block()
        .ok_or_else(|| Error::Invalid("gradcam needs at least one conv block".into()))?;
    m.check_input(batch)?;
    let mut g = Graph::new();
    let input = g.constant(batch.clone());
    let fv = m.build(&mut g, input, false, None)?;
    let act = fv.block_act(layer)?;
    let root = selected_logit_sum(&mut g, fv.logits, classes)?;
    let weights = channel_weights(&g, root, act)?;
    let map = weighted_map(&mut g, act, weights, cam.gradcam_relu)?;
    Ok(g.value(map).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Activation, ConvBlock, Head, ModelConfig, TapPoint};

    fn tiny() -> ModelConfig {
        ModelConfig {
            input: [4, 6],
            blocks: vec![ConvBlock {
                out_channels: 3,
                kernel: [3, 3],
                pool: [2, 2],
            }],
            activation: Activation::Relu,
            head: Head::Flatten,
            hidden: 5,
            taps: vec![TapPoint::Embedding],
            ..Default::default()
        }
    }

    fn input(n: usize) -> Tensor {
        Tensor::new(
            vec![1, 1, 4, 6],
            (0..24).map(|i| ((i * 7 + n) as f64 * 0.3).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn no_dependence_gives_zero_map() {
        let mut m = Model::init(&tiny(), 1).unwrap();
        let mut w = m.params().get("out.weight").unwrap().clone();
        for r in 0..5 {
            w.data_mut()[r * 2 + 1] = 0.0;
        }
        m.set_param("out.weight", w).unwrap();
        let map = gradcam(&m, &input(0), 1, 0).unwrap();
        assert_eq!(map.values.len(), 24);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_class_and_layer() {
        let m = Model::init(&tiny(), 1).unwrap();
        assert!(gradcam(&m, &input(0), 2, 0).is_err());
        assert!(gradcam(&m, &input(0), 0, 1).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let m = Model::init(&tiny(), 2).unwrap();
        let a = input(0);
        let b = input(5);
        let both = Tensor::stack(&[&a.reshape(&[1, 4, 6]).unwrap(), &b.reshape(&[1, 4, 6]).unwrap()]).unwrap();
        let maps = gradcam_batch(&m, &both, &[0, 1], &m.config().clone()).unwrap();
        let sa = gradcam(&m, &a, 0, 0).unwrap();
        let sb = gradcam(&m, &b, 1, 0).unwrap();
        assert_eq!(&maps.data()[..24], &sa.values[..]);
        assert_eq!(&maps.data()[24..], &sb.values[..]);
    }
}
