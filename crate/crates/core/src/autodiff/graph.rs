use std::collections::BTreeMap;

use crate::autodiff::ops::{backward_op, eval_op, OpKind};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Origin {
    Constant,
    Param(String),
    Op { kind: OpKind, operands: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    origin: Origin,
    value: Tensor,
}

/// An eagerly evaluated computation tape.
///
/// Nodes are appended in evaluation order, so operands always precede the
/// nodes that use them and reverse index order is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to selected nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, origin: Origin, value: Tensor) -> Var {
        self.nodes.push(Node { origin, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Origin::Constant, value)
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(Origin::Param(name.into()), value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, kind: OpKind, operands: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = eval_op(&kind, &values)?;
        Ok(self.push(
            Origin::Op {
                kind,
                operands: operands.to_vec(),
            },
            out,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(OpKind::Scale(s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    /// Gradients of `root` with respect to every parameter leaf, keyed by name.
    /// A name used by several leaves receives the sum of their gradients.
    pub fn backward(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let targets: Vec<Var> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].origin, Origin::Param(_)))
            .map(Var)
            .collect();
        let grads = self.grad_wrt(root, &targets)?;
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for v in targets {
            let Origin::Param(name) = &self.nodes[v.0].origin else {
                unreachable!()
            };
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    /// Reverse-mode pass restricted to nodes that lie on a path from one of
    /// `targets` to `root`.
    pub fn grad_wrt(&self, root: Var, targets: &[Var]) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut needs = vec![false; n];
        for t in targets {
            if t.0 < n {
                needs[t.0] = true;
            }
        }
        for i in 0..n {
            if let Origin::Op { operands, .. } = &self.nodes[i].origin {
                if operands.iter().any(|o| needs[o.0]) {
                    needs[i] = true;
                }
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if !needs[root.0] {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(root_val.shape()));
        for i in (0..n).rev() {
            let Origin::Op { kind, operands } = &self.nodes[i].origin else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let operand_needs: Vec<bool> = operands.iter().map(|o| needs[o.0]).collect();
            let values: Vec<&Tensor> = operands.iter().map(|o| &self.nodes[o.0].value).collect();
            let parts = backward_op(kind, &values, &self.nodes[i].value, &g, &operand_needs);
            for ((o, part), need) in operands.iter().zip(parts).zip(operand_needs) {
                let (Some(part), true) = (part, need) else { continue };
                match grads[o.0].as_mut() {
                    Some(acc) => acc.add_assign(&part),
                    None => grads[o.0] = Some(part),
                }
            }
            // keep the gradient of explicitly requested intermediate nodes
            if targets.contains(&Var(i)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}
