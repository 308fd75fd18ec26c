use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Parameter { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Replaces every gradient; all parameters must be covered with matching shapes.
    pub fn set_grads(&mut self, mut grads: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let g = grads.remove(name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(shape_err(
                    "set_grads",
                    format!("`{name}`: value {:?} vs grad {:?}", p.value.shape(), g.shape()),
                ));
            }
            p.grad = Some(g);
        }
        if let Some(extra) = grads.keys().next() {
            return Err(Error::Invalid(format!("gradient for unknown parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.001,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = match self {
            OptimizerConfig::Sgd { lr, momentum } => {
                if !(0.0..1.0).contains(momentum) {
                    return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
                }
                *lr
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || *eps <= 0.0 {
                    return Err(Error::Config("adam betas must lie in [0, 1) and eps > 0".into()));
                }
                *lr
            }
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter moment buffers.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    slots: BTreeMap<String, Slot>,
    steps: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Applies one update to every parameter from its stored gradient.
///
/// SGD: `v ← momentum·v + g; p ← p − lr·v`. Adam uses bias-corrected moments.
pub fn optimizer_step(params: &mut ParameterStore, config: &OptimizerConfig, state: &mut OptimizerState) -> Result<()> {
    config.validate()?;
    if let Some((name, _)) = params.params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGrad(name.clone()));
    }
    state.steps += 1;
    let t = state.steps as i32;
    for (name, p) in params.params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Slot {
            first: vec![0.0; g.numel()],
            second: vec![0.0; g.numel()],
        });
        let value = p.value.data_mut();
        match *config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((w, v), gi) in value.iter_mut().zip(&mut slot.first).zip(g.data()) {
                    *v = momentum * *v + gi;
                    *w -= lr * *v;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, m), v), gi) in value
                    .iter_mut()
                    .zip(&mut slot.first)
                    .zip(&mut slot.second)
                    .zip(g.data())
                {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(p: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::vector(vec![p])).unwrap();
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::vector(vec![g]))])
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store(1.0);
        s.set_grads(grads(2.0)).unwrap();
        let cfg = OptimizerConfig::Sgd { lr: 0.1, momentum: 0.0 };
        optimizer_step(&mut s, &cfg, &mut OptimizerState::new()).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = store(0.0);
        let cfg = OptimizerConfig::Sgd { lr: 1.0, momentum: 0.9 };
        let mut st = OptimizerState::new();
        for _ in 0..2 {
            s.set_grads(grads(1.0)).unwrap();
            optimizer_step(&mut s, &cfg, &mut st).unwrap();
        }
        assert!((s.get("p").unwrap().data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_value() {
        let mut s = store(1.5);
        s.set_grads(grads(0.0)).unwrap();
        let cfg = OptimizerConfig::Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        optimizer_step(&mut s, &cfg, &mut OptimizerState::new()).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.5]);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut s = store(1.0);
        let cfg = OptimizerConfig::default();
        let err = optimizer_step(&mut s, &cfg, &mut OptimizerState::new()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "p"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store(1.0);
        assert!(s.insert("p", Tensor::scalar(0.0)).is_err());
    }
}
