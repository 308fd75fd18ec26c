use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, ParameterStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::config::{Activation, Head, ModelConfig, TapPoint, CLASSES};

/// A small CNN: conv blocks (conv → activation → max-pool), a flatten or
/// global-average head, an optional hidden dense layer and two logits.
///
/// Parameter names: `conv{i}.weight` `[O, C, KH, KW]`, `conv{i}.bias`,
/// `hidden.weight` `[F, H]`, `hidden.bias`, `out.weight` `[E, 2]`, `out.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    seed: u64,
}

/// Per-sample embeddings, one `[N, D]` tensor per tap point in config order.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSet {
    pub entries: Vec<(TapPoint, Tensor)>,
}

impl TapSet {
    pub fn get(&self, tap: TapPoint) -> Option<&Tensor> {
        self.entries.iter().find(|(t, _)| *t == tap).map(|(_, v)| v)
    }

    pub fn last(&self) -> Option<&(TapPoint, Tensor)> {
        self.entries.last()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[N, 2]`
    pub logits: Tensor,
    pub taps: TapSet,
    /// `[N, C, h, w]` activations of the Grad-CAM block, when the model has blocks.
    pub gradcam_activation: Option<Tensor>,
}

/// Graph handles produced by [`Model::build`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub taps: Vec<(TapPoint, Var)>,
    /// Post-activation, pre-pool output of each block (`None` when skipped).
    pub block_acts: Vec<Option<Var>>,
}

impl ForwardVars {
    pub fn block_act(&self, layer: usize) -> Result<Var> {
        self.block_acts
            .get(layer)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Invalid(format!("no activation recorded for block {layer}")))
    }
}

impl Model {
    /// Kaiming-uniform fan-in weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let geo = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("consistent")
        };
        let mut params = ParameterStore::new();
        let mut in_c = 1;
        for (i, b) in config.blocks.iter().enumerate() {
            let [kh, kw] = b.kernel;
            params.insert(
                format!("conv{i}.weight"),
                uniform(vec![b.out_channels, in_c, kh, kw], in_c * kh * kw),
            )?;
            params.insert(format!("conv{i}.bias"), Tensor::zeros(&[b.out_channels]))?;
            in_c = b.out_channels;
        }
        if config.hidden > 0 {
            params.insert(
                "hidden.weight",
                uniform(vec![geo.features, config.hidden], geo.features),
            )?;
            params.insert("hidden.bias", Tensor::zeros(&[config.hidden]))?;
        }
        params.insert("out.weight", uniform(vec![geo.embedding, CLASSES], geo.embedding))?;
        params.insert("out.bias", Tensor::zeros(&[CLASSES]))?;
        Ok(Self {
            config: config.clone(),
            params,
            seed,
        })
    }

    /// Rebuilds a model from explicit parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, params: ParameterStore, seed: u64) -> Result<Self> {
        let reference = Self::init(&config, 0)?;
        let expected: Vec<_> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let given: Vec<_> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != given {
            return Err(Error::Config(format!(
                "parameters do not match the model config: expected {expected:?}, got {given:?}"
            )));
        }
        Ok(Self { config, params, seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Overwrites one parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(shape_err(
                "set_param",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            model: Arc::new(self.clone()),
        }
    }

    pub(crate) fn check_input(&self, batch: &Tensor) -> Result<usize> {
        let [h, w] = self.config.input;
        match batch.shape() {
            [n, 1, bh, bw] if *bh == h && *bw == w => Ok(*n),
            other => Err(shape_err(
                "model input",
                format!("expected [N, 1, {h}, {w}], got {other:?}"),
            )),
        }
    }

    fn activate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Relu => g.apply(OpKind::Relu, &[x]),
            Activation::LeakyRelu => g.apply(OpKind::LeakyRelu(self.config.leaky_slope), &[x]),
        }
    }

    /// Records the forward pass on `g`. Parameters become named leaves when
    /// `trainable`, constants otherwise. With `resume = Some((i, act))` the
    /// pass starts from `act` as the activation of block `i`.
    pub fn build(
        &self,
        g: &mut Graph,
        input: Var,
        trainable: bool,
        resume: Option<(usize, Var)>,
    ) -> Result<ForwardVars> {
        let leaf = |g: &mut Graph, name: &str| {
            let v = self.params.get(name).expect("parameter exists").clone();
            if trainable {
                g.param(name, v)
            } else {
                g.constant(v)
            }
        };
        let n = g.value(input).shape()[0];
        let mut x = input;
        let mut taps = Vec::with_capacity(self.config.taps.len());
        let mut block_acts = vec![None; self.config.blocks.len()];
        for (i, b) in self.config.blocks.iter().enumerate() {
            let act = match resume {
                Some((start, _)) if i < start => continue,
                Some((start, act)) if i == start => act,
                _ => {
                    let w = leaf(g, &format!("conv{i}.weight"));
                    let bias = leaf(g, &format!("conv{i}.bias"));
                    let conv = g.apply(
                        OpKind::Conv2d {
                            stride: [1, 1],
                            padding: [(b.kernel[0] - 1) / 2, (b.kernel[1] - 1) / 2],
                        },
                        &[x, w, bias],
                    )?;
                    self.activate(g, conv)?
                }
            };
            block_acts[i] = Some(act);
            x = if b.pool == [1, 1] {
                act
            } else {
                g.apply(
                    OpKind::MaxPool2d {
                        window: b.pool,
                        stride: b.pool,
                    },
                    &[act],
                )?
            };
            if self.config.taps.contains(&TapPoint::Block(i)) {
                let width = g.value(x).numel() / n;
                taps.push((TapPoint::Block(i), g.reshape(x, &[n, width])?));
            }
        }
        let features = match self.config.head {
            Head::GlobalAvgPool if !self.config.blocks.is_empty() => g.apply(OpKind::GlobalAvgPool, &[x])?,
            _ => {
                let width = g.value(x).numel() / n;
                g.reshape(x, &[n, width])?
            }
        };
        let embedding = if self.config.hidden > 0 {
            let w = leaf(g, "hidden.weight");
            let b = leaf(g, "hidden.bias");
            let h = g.apply(OpKind::Dense, &[features, w, b])?;
            self.activate(g, h)?
        } else {
            features
        };
        if self.config.taps.contains(&TapPoint::Embedding) {
            taps.push((TapPoint::Embedding, embedding));
        }
        let w = leaf(g, "out.weight");
        let b = leaf(g, "out.bias");
        let logits = g.apply(OpKind::Dense, &[embedding, w, b])?;
        Ok(ForwardVars {
            logits,
            taps,
            block_acts,
        })
    }

    /// Logits, tap embeddings and Grad-CAM activations from one forward pass.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let mut g = Graph::new();
        let input = g.constant(batch.clone());
        let fv = self.build(&mut g, input, false, None)?;
        let gradcam_activation = match self.config.gradcam_block() {
            Some(l) => Some(g.value(fv.block_act(l)?).clone()),
            None => None,
        };
        Ok(ForwardOutput {
            logits: g.value(fv.logits).clone(),
            taps: TapSet {
                entries: fv.taps.iter().map(|(t, v)| (*t, g.value(*v).clone())).collect(),
            },
            gradcam_activation,
        })
    }

    /// Logits only, evaluated without recording a graph.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_input(batch)?;
        let p = |name: &str| self.params.get(name).expect("parameter exists");
        let mut x = batch.clone();
        for (i, b) in self.config.blocks.iter().enumerate() {
            let conv = crate::autodiff::eval_op(
                &OpKind::Conv2d {
                    stride: [1, 1],
                    padding: [(b.kernel[0] - 1) / 2, (b.kernel[1] - 1) / 2],
                },
                &[&x, p(&format!("conv{i}.weight")), p(&format!("conv{i}.bias"))],
            )?;
            x = self.activate_value(&conv)?;
            if b.pool != [1, 1] {
                x = crate::autodiff::eval_op(
                    &OpKind::MaxPool2d {
                        window: b.pool,
                        stride: b.pool,
                    },
                    &[&x],
                )?;
            }
        }
        let mut features = match self.config.head {
            Head::GlobalAvgPool if !self.config.blocks.is_empty() => {
                crate::autodiff::eval_op(&OpKind::GlobalAvgPool, &[&x])?
            }
            _ => {
                let width = x.numel() / n;
                x.reshape(&[n, width])?
            }
        };
        if self.config.hidden > 0 {
            let h = crate::autodiff::eval_op(&OpKind::Dense, &[&features, p("hidden.weight"), p("hidden.bias")])?;
            features = self.activate_value(&h)?;
        }
        crate::autodiff::eval_op(&OpKind::Dense, &[&features, p("out.weight"), p("out.bias")])
    }

    fn activate_value(&self, x: &Tensor) -> Result<Tensor> {
        match self.config.activation {
            Activation::Relu => crate::autodiff::eval_op(&OpKind::Relu, &[x]),
            Activation::LeakyRelu => crate::autodiff::eval_op(&OpKind::LeakyRelu(self.config.leaky_slope), &[x]),
        }
    }

    /// Runs the network from the activation of block `layer` onward.
    pub fn logits_from_activation(&self, layer: usize, act: &Tensor) -> Result<Tensor> {
        let geo = self.config.validate()?;
        let expected = geo
            .activations
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("block {layer} does not exist")))?;
        if act.shape().len() != 4 || act.shape()[1..] != expected[..] {
            return Err(shape_err(
                "logits_from_activation",
                format!(
                    "expected [N, {}, {}, {}], got {:?}",
                    expected[0],
                    expected[1],
                    expected[2],
                    act.shape()
                ),
            ));
        }
        let mut g = Graph::new();
        let a = g.constant(act.clone());
        let dummy = g.constant(Tensor::zeros(&[act.shape()[0], 1, 1, 1]));
        let fv = self.build(&mut g, dummy, false, Some((layer, a)))?;
        Ok(g.value(fv.logits).clone())
    }
}

/// A frozen copy of a model. It exposes no mutable access, so training the
/// source model can never change it.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    model: Arc<Model>,
}

impl ModelSnapshot {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn checksum(&self) -> String {
        self.model.params.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ConvBlock;

    fn zero(cfg: &ModelConfig) -> Model {
        let mut m = Model::init(cfg, 0).unwrap();
        let names: Vec<String> = m.params().names().map(String::from).collect();
        for n in names {
            let shape = m.params().get(&n).unwrap().shape().to_vec();
            m.set_param(&n, Tensor::zeros(&shape)).unwrap();
        }
        m
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(Model::init(&cfg, 7).unwrap(), Model::init(&cfg, 7).unwrap());
        assert_ne!(
            Model::init(&cfg, 7).unwrap().params(),
            Model::init(&cfg, 8).unwrap().params()
        );
    }

    #[test]
    fn default_model_gives_two_logits() {
        let m = Model::init(&ModelConfig::default(), 1).unwrap();
        let out = m.forward_with_taps(&Tensor::ones(&[1, 1, 20, 32])).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2]);
        assert_eq!(out.gradcam_activation.unwrap().shape(), &[1, 16, 5, 8]);
    }

    #[test]
    fn zero_model_zero_logits() {
        let m = zero(&ModelConfig::default());
        let out = m.forward_with_taps(&Tensor::full(&[3, 1, 20, 32], 0.7)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_have_one_row_per_sample() {
        let m = Model::init(&ModelConfig::default(), 2).unwrap();
        let out = m.forward_with_taps(&Tensor::ones(&[5, 1, 20, 32])).unwrap();
        assert_eq!(out.taps.entries.len(), 4);
        for (_, t) in &out.taps.entries {
            assert_eq!(t.shape()[0], 5);
        }
        assert_eq!(out.taps.get(TapPoint::Block(0)).unwrap().shape(), &[5, 4 * 10 * 16]);
        assert_eq!(out.taps.get(TapPoint::Embedding).unwrap().shape(), &[5, 64]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = Model::init(&ModelConfig::default(), 2).unwrap();
        assert!(m.forward_with_taps(&Tensor::ones(&[1, 1, 20, 31])).is_err());
    }

    #[test]
    fn hand_computed_single_block() {
        // 1x1 conv (w = 2, b = 0.5) on a 1x2 input, relu, flatten, no hidden layer
        let cfg = ModelConfig {
            input: [1, 2],
            blocks: vec![ConvBlock {
                out_channels: 1,
                kernel: [1, 1],
                pool: [1, 1],
            }],
            activation: Activation::Relu,
            hidden: 0,
            taps: vec![TapPoint::Embedding],
            ..Default::default()
        };
        let mut m = Model::init(&cfg, 0).unwrap();
        m.set_param("conv0.weight", Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap())
            .unwrap();
        m.set_param("conv0.bias", Tensor::vector(vec![0.5])).unwrap();
        m.set_param(
            "out.weight",
            Tensor::new(vec![2, 2], vec![1.0, -1.0, 3.0, 0.25]).unwrap(),
        )
        .unwrap();
        m.set_param("out.bias", Tensor::vector(vec![0.1, -0.2])).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, -3.0]).unwrap();
        // activations: relu(2.5) = 2.5, relu(-5.5) = 0
        let expected = [2.5 * 1.0 + 0.1, -2.5 - 0.2];
        let out = m.forward_with_taps(&x).unwrap();
        for (a, e) in out.logits.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn taps_do_not_change_logits() {
        let m = Model::init(&ModelConfig::default(), 9).unwrap();
        let x = Tensor::new(vec![2, 1, 20, 32], (0..1280).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = m.forward_with_taps(&x).unwrap().logits;
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_from_activation_matches_full_pass() {
        let m = Model::init(&ModelConfig::default(), 4).unwrap();
        let x = Tensor::new(vec![1, 1, 20, 32], (0..640).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let out = m.forward_with_taps(&x).unwrap();
        let resumed = m
            .logits_from_activation(2, out.gradcam_activation.as_ref().unwrap())
            .unwrap();
        assert_eq!(resumed, out.logits);
    }

    #[test]
    fn snapshot_unaffected_by_training() {
        let mut m = Model::init(&ModelConfig::default(), 3).unwrap();
        let snap = m.snapshot();
        let before = snap.checksum();
        let w = m.params().get("out.bias").unwrap().map(|v| v + 1.0);
        m.set_param("out.bias", w).unwrap();
        assert_eq!(snap.checksum(), before);
        assert_ne!(m.params().checksum(), before);
    }
}
