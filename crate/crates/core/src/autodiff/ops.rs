//! Forward and backward rules for every primitive.
//!
//! Conventions:
//! - `conv2d` takes an NCHW input, an OIHW kernel and an optional `[O]` bias.
//! - `maxpool2d` has no padding; ties route the gradient to the lowest linear
//!   index in the window.
//! - `dense` takes input `[N, F]`, weight `[F, G]`, bias `[G]`.
//! - Row-wise kinds (`l2_norm`, `dot`, `cosine_similarity`, `normalize`) view
//!   a rank-1 tensor as one row and anything else as `[shape[0], rest]`.
//! - All reductions run in a fixed left-to-right order.

use crate::autodiff::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::autodiff::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Abs,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    LogSigmoid,
    Log,
    Sum,
    Mean,
    Matmul,
    Dense,
    Conv2d {
        stride: [usize; 2],
        padding: [usize; 2],
    },
    MaxPool2d {
        window: [usize; 2],
        stride: [usize; 2],
    },
    GlobalAvgPool,
    L2Norm,
    Dot,
    CosineSimilarity,
    /// Mean softmax cross-entropy of `[N, K]` logits against fixed labels.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    Reshape(Vec<usize>),
    /// Row-wise `x / ‖x‖₂`; a zero row maps to zero.
    Normalize,
    /// `[N, C, H, W]` maps weighted by `[N, C]` and summed over channels into `[N, H·W]`.
    ChannelWeightedSum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Abs => "abs",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Matmul => "matmul",
            OpKind::Dense => "dense",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2d { .. } => "maxpool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::L2Norm => "l2_norm",
            OpKind::Dot => "dot",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::Reshape(_) => "reshape",
            OpKind::Normalize => "normalize",
            OpKind::ChannelWeightedSum => "channel_weighted_sum",
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Matmul
            | OpKind::Dot
            | OpKind::CosineSimilarity
            | OpKind::ChannelWeightedSum => (2, 2),
            OpKind::Dense => (3, 3),
            OpKind::Conv2d { .. } => (2, 3),
            _ => (1, 1),
        }
    }
}

fn mismatch(kind: &OpKind, operands: &[&Tensor]) -> Error {
    let shapes: Vec<_> = operands.iter().map(|t| t.shape().to_vec()).collect();
    shape_err(kind.name(), format!("operand shapes {shapes:?}"))
}

fn row_dims(t: &Tensor) -> (usize, usize) {
    let rows = t.rows();
    (rows, t.numel() / rows)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Evaluates one primitive on concrete operands.
pub fn eval_op(kind: &OpKind, operands: &[&Tensor]) -> Result<Tensor> {
    let (lo, hi) = kind.arity();
    if operands.len() < lo || operands.len() > hi {
        return Err(shape_err(
            kind.name(),
            format!("expected {lo}..={hi} operands, got {}", operands.len()),
        ));
    }
    for t in operands {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("operand of {}", kind.name())));
        }
    }
    let out = forward(kind, operands)?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("output of {}", kind.name())));
    }
    Ok(out)
}

fn elementwise(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(f)
}

fn binary(kind: &OpKind, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(kind, &[a, b]));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn forward(kind: &OpKind, ops: &[&Tensor]) -> Result<Tensor> {
    let a = ops[0];
    Ok(match kind {
        OpKind::Add => binary(kind, a, ops[1], |x, y| x + y)?,
        OpKind::Sub => binary(kind, a, ops[1], |x, y| x - y)?,
        OpKind::Mul => binary(kind, a, ops[1], |x, y| x * y)?,
        OpKind::Scale(s) => elementwise(a, |x| s * x),
        OpKind::Abs => elementwise(a, f64::abs),
        OpKind::Relu => elementwise(a, |x| if x > 0.0 { x } else { 0.0 }),
        OpKind::LeakyRelu(s) => elementwise(a, |x| if x > 0.0 { x } else { s * x }),
        OpKind::Sigmoid => elementwise(a, sigmoid),
        OpKind::LogSigmoid => elementwise(a, log_sigmoid),
        OpKind::Log => {
            if a.data().iter().any(|&x| x <= 0.0) {
                return Err(Error::Invalid("log of a non-positive value".into()));
            }
            elementwise(a, f64::ln)
        }
        OpKind::Sum => Tensor::scalar(a.data().iter().sum()),
        OpKind::Mean => Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64),
        OpKind::Matmul => {
            let b = ops[1];
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(kind, ops));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n))
        }
        OpKind::Dense => {
            let (w, bias) = (ops[1], ops[2]);
            if a.shape().len() != 2
                || w.shape().len() != 2
                || bias.shape().len() != 1
                || a.shape()[1] != w.shape()[0]
                || w.shape()[1] != bias.shape()[0]
            {
                return Err(mismatch(kind, ops));
            }
            let (n, f, g) = (a.shape()[0], a.shape()[1], w.shape()[1]);
            let mut out = matmul(a.data(), w.data(), n, f, g);
            for row in out.chunks_mut(g) {
                for (o, b) in row.iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            Tensor::from_parts(vec![n, g], out)
        }
        OpKind::Conv2d { stride, padding } => {
            let geo = ConvGeometry::new(kind, ops, *stride, *padding)?;
            geo.forward(a.data(), ops[1].data(), ops.get(2).map(|b| b.data()))
        }
        OpKind::MaxPool2d { window, stride } => {
            let geo = PoolGeometry::new(kind, a, *window, *stride)?;
            let (out, _) = geo.forward(a.data());
            out
        }
        OpKind::GlobalAvgPool => {
            if a.shape().len() != 4 {
                return Err(mismatch(kind, ops));
            }
            let (n, c) = (a.shape()[0], a.shape()[1]);
            let plane = a.shape()[2] * a.shape()[3];
            let data = a
                .data()
                .chunks(plane)
                .map(|p| p.iter().sum::<f64>() / plane as f64)
                .collect();
            Tensor::from_parts(vec![n, c], data)
        }
        OpKind::L2Norm => {
            let (rows, width) = row_dims(a);
            let data = a
                .data()
                .chunks(width)
                .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Tensor::from_parts(vec![rows], data)
        }
        OpKind::Dot | OpKind::CosineSimilarity => {
            let b = ops[1];
            if a.shape() != b.shape() {
                return Err(mismatch(kind, ops));
            }
            let (rows, width) = row_dims(a);
            let data = a
                .data()
                .chunks(width)
                .zip(b.data().chunks(width))
                .map(|(x, y)| {
                    if matches!(kind, OpKind::Dot) {
                        dot(x, y)
                    } else {
                        cosine(x, y).0
                    }
                })
                .collect();
            Tensor::from_parts(vec![rows], data)
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            if a.shape().len() != 2 || labels.len() != a.shape()[0] {
                return Err(shape_err(
                    kind.name(),
                    format!("logits {:?} with {} labels", a.shape(), labels.len()),
                ));
            }
            let k = a.shape()[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
            }
            let total: f64 = a
                .data()
                .chunks(k)
                .zip(labels)
                .map(|(row, &y)| log_sum_exp(row) - row[y])
                .sum();
            Tensor::scalar(total / labels.len() as f64)
        }
        OpKind::Reshape(shape) => a
            .reshape(shape)
            .map_err(|_| shape_err(kind.name(), format!("{:?} -> {shape:?}", a.shape())))?,
        OpKind::Normalize => {
            let (_, width) = row_dims(a);
            let mut data = Vec::with_capacity(a.numel());
            for row in a.data().chunks(width) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    data.extend(row.iter().map(|x| x / n));
                } else {
                    data.extend(std::iter::repeat_n(0.0, width));
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        OpKind::ChannelWeightedSum => {
            let w = ops[1];
            if a.shape().len() != 4 || w.shape() != &a.shape()[..2] {
                return Err(mismatch(kind, ops));
            }
            let (n, c) = (a.shape()[0], a.shape()[1]);
            let plane = a.shape()[2] * a.shape()[3];
            let mut out = vec![0.0; n * plane];
            for s in 0..n {
                let dst = &mut out[s * plane..(s + 1) * plane];
                for ch in 0..c {
                    let wv = w.data()[s * c + ch];
                    let src = &a.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                    for (d, x) in dst.iter_mut().zip(src) {
                        *d += wv * x;
                    }
                }
            }
            Tensor::from_parts(vec![n, plane], out)
        }
    })
}

/// Vector-Jacobian products: one optional gradient per operand, computed only
/// where `needs[i]` is set.
pub(crate) fn backward_op(
    kind: &OpKind,
    ops: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let a = ops[0];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let zip_map = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
        let data = t.data().iter().zip(g.data()).map(|(&x, &gi)| f(x, gi)).collect();
        Tensor::from_parts(t.shape().to_vec(), data)
    };
    match kind {
        OpKind::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        OpKind::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|x| -x))],
        OpKind::Mul => {
            let b = ops[1];
            vec![
                want(0).then(|| zip_map(b, &|y, gi| y * gi)),
                want(1).then(|| zip_map(a, &|x, gi| x * gi)),
            ]
        }
        OpKind::Scale(s) => vec![Some(g.map(|x| s * x))],
        OpKind::Abs => vec![Some(zip_map(a, &|x, gi| {
            if x > 0.0 {
                gi
            } else if x < 0.0 {
                -gi
            } else {
                0.0
            }
        }))],
        OpKind::Relu => vec![Some(zip_map(a, &|x, gi| if x > 0.0 { gi } else { 0.0 }))],
        OpKind::LeakyRelu(s) => vec![Some(zip_map(a, &|x, gi| if x > 0.0 { gi } else { s * gi }))],
        OpKind::Sigmoid => vec![Some(zip_map(out, &|y, gi| gi * y * (1.0 - y)))],
        OpKind::LogSigmoid => vec![Some(zip_map(a, &|x, gi| gi * sigmoid(-x)))],
        OpKind::Log => vec![Some(zip_map(a, &|x, gi| gi / x))],
        OpKind::Sum => vec![Some(Tensor::full(a.shape(), g.data()[0]))],
        OpKind::Mean => vec![Some(Tensor::full(a.shape(), g.data()[0] / a.numel() as f64))],
        OpKind::Matmul => {
            let b = ops[1];
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            vec![
                want(0).then(|| Tensor::from_parts(vec![m, k], matmul_bt(g.data(), b.data(), m, n, k))),
                want(1).then(|| Tensor::from_parts(vec![k, n], matmul_at(a.data(), g.data(), m, k, n))),
            ]
        }
        OpKind::Dense => {
            let w = ops[1];
            let (n, f, gw) = (a.shape()[0], a.shape()[1], w.shape()[1]);
            let db = want(2).then(|| {
                let mut acc = vec![0.0; gw];
                for row in g.data().chunks(gw) {
                    for (s, x) in acc.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                Tensor::from_parts(vec![gw], acc)
            });
            vec![
                want(0).then(|| Tensor::from_parts(vec![n, f], matmul_bt(g.data(), w.data(), n, gw, f))),
                want(1).then(|| Tensor::from_parts(vec![f, gw], matmul_at(a.data(), g.data(), n, f, gw))),
                db,
            ]
        }
        OpKind::Conv2d { stride, padding } => {
            let geo = ConvGeometry::new(kind, ops, *stride, *padding).expect("validated in forward");
            geo.backward(a.data(), ops[1].data(), g.data(), want(0), want(1), want(2))
        }
        OpKind::MaxPool2d { window, stride } => {
            let geo = PoolGeometry::new(kind, a, *window, *stride).expect("validated in forward");
            let (_, arg) = geo.forward(a.data());
            let mut grad = vec![0.0; a.numel()];
            for (&idx, &gi) in arg.iter().zip(g.data()) {
                grad[idx] += gi;
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), grad))]
        }
        OpKind::GlobalAvgPool => {
            let plane = a.shape()[2] * a.shape()[3];
            let mut grad = Vec::with_capacity(a.numel());
            for &gi in g.data() {
                grad.extend(std::iter::repeat_n(gi / plane as f64, plane));
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), grad))]
        }
        OpKind::L2Norm => {
            let (_, width) = row_dims(a);
            let mut grad = Vec::with_capacity(a.numel());
            for ((row, &n), &gi) in a.data().chunks(width).zip(out.data()).zip(g.data()) {
                if n > 0.0 {
                    grad.extend(row.iter().map(|x| gi * x / n));
                } else {
                    grad.extend(std::iter::repeat_n(0.0, width));
                }
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), grad))]
        }
        OpKind::Dot => {
            let b = ops[1];
            let (_, width) = row_dims(a);
            let scaled = |t: &Tensor| {
                let mut grad = Vec::with_capacity(t.numel());
                for (row, &gi) in t.data().chunks(width).zip(g.data()) {
                    grad.extend(row.iter().map(|x| gi * x));
                }
                Tensor::from_parts(t.shape().to_vec(), grad)
            };
            vec![want(0).then(|| scaled(b)), want(1).then(|| scaled(a))]
        }
        OpKind::CosineSimilarity => {
            let b = ops[1];
            let (_, width) = row_dims(a);
            let mut ga = Vec::with_capacity(a.numel());
            let mut gb = Vec::with_capacity(b.numel());
            for ((x, y), &gi) in a.data().chunks(width).zip(b.data().chunks(width)).zip(g.data()) {
                let (cos, na, nb) = cosine(x, y);
                if na > 0.0 && nb > 0.0 {
                    let inv = 1.0 / (na * nb);
                    ga.extend(x.iter().zip(y).map(|(xi, yi)| gi * (yi * inv - cos * xi / (na * na))));
                    gb.extend(x.iter().zip(y).map(|(xi, yi)| gi * (xi * inv - cos * yi / (nb * nb))));
                } else {
                    ga.extend(std::iter::repeat_n(0.0, width));
                    gb.extend(std::iter::repeat_n(0.0, width));
                }
            }
            vec![
                want(0).then(|| Tensor::from_parts(a.shape().to_vec(), ga)),
                want(1).then(|| Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            let k = a.shape()[1];
            let scale = g.data()[0] / labels.len() as f64;
            let mut grad = Vec::with_capacity(a.numel());
            for (row, &y) in a.data().chunks(k).zip(labels) {
                let lse = log_sum_exp(row);
                for (j, &z) in row.iter().enumerate() {
                    let p = (z - lse).exp();
                    grad.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                }
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), grad))]
        }
        OpKind::Reshape(_) => vec![Some(Tensor::from_parts(a.shape().to_vec(), g.data().to_vec()))],
        OpKind::Normalize => {
            let (_, width) = row_dims(a);
            let mut grad = Vec::with_capacity(a.numel());
            for ((x, y), gr) in a
                .data()
                .chunks(width)
                .zip(out.data().chunks(width))
                .zip(g.data().chunks(width))
            {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    let yg = dot(y, gr);
                    grad.extend(y.iter().zip(gr).map(|(yi, gi)| (gi - yi * yg) / n));
                } else {
                    grad.extend(std::iter::repeat_n(0.0, width));
                }
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), grad))]
        }
        OpKind::ChannelWeightedSum => {
            let w = ops[1];
            let (n, c) = (a.shape()[0], a.shape()[1]);
            let plane = a.shape()[2] * a.shape()[3];
            let ga = want(0).then(|| {
                let mut grad = vec![0.0; a.numel()];
                for s in 0..n {
                    let gs = &g.data()[s * plane..(s + 1) * plane];
                    for ch in 0..c {
                        let wv = w.data()[s * c + ch];
                        let dst = &mut grad[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        for (d, gi) in dst.iter_mut().zip(gs) {
                            *d = wv * gi;
                        }
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), grad)
            });
            let gw = want(1).then(|| {
                let mut grad = vec![0.0; n * c];
                for s in 0..n {
                    let gs = &g.data()[s * plane..(s + 1) * plane];
                    for ch in 0..c {
                        let src = &a.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        grad[s * c + ch] = dot(src, gs);
                    }
                }
                Tensor::from_parts(w.shape().to_vec(), grad)
            });
            vec![ga, gw]
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Returns `(cos, ‖x‖, ‖y‖)`; the cosine is zero when either norm vanishes.
fn cosine(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let na = dot(x, x).sqrt();
    let nb = dot(y, y).sqrt();
    if na > 0.0 && nb > 0.0 {
        (dot(x, y) / (na * nb), na, nb)
    } else {
        (0.0, na, nb)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// `[m, k] · [k, n]`
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm_nn(a, b, m, k, n)
}

/// `[m, n] · [k, n]ᵀ` → `[m, k]`
fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    gemm_nt(g, b, m, n, k)
}

/// `[m, k]ᵀ · [m, n]` → `[k, n]`
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm_tn(a, g, m, k, n)
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: [usize; 2],
    pad: [usize; 2],
}

impl ConvGeometry {
    fn new(kind: &OpKind, ops: &[&Tensor], stride: [usize; 2], pad: [usize; 2]) -> Result<Self> {
        let (x, k) = (ops[0], ops[1]);
        if x.shape().len() != 4 || k.shape().len() != 4 || x.shape()[1] != k.shape()[1] {
            return Err(mismatch(kind, ops));
        }
        if stride[0] == 0 || stride[1] == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        if let Some(b) = ops.get(2) {
            if b.shape() != [o] {
                return Err(mismatch(kind, ops));
            }
        }
        if h + 2 * pad[0] < kh || w + 2 * pad[1] < kw {
            return Err(mismatch(kind, ops));
        }
        let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
        let ow = (w + 2 * pad[1] - kw) / stride[1] + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Input row for output row `r` and kernel row `i`, if inside the image.
    fn in_row(&self, r: usize, i: usize) -> Option<usize> {
        let v = (r * self.stride[0] + i) as isize - self.pad[0] as isize;
        (v >= 0 && (v as usize) < self.h).then_some(v as usize)
    }

    /// Output columns `[lo, hi)` whose input column for kernel column `j` is in range.
    fn col_range(&self, j: usize) -> (usize, usize) {
        let (s, p) = (self.stride[1], self.pad[1]);
        let lo = if p > j { (p - j).div_ceil(s) } else { 0 };
        if self.w + p < j + 1 {
            return (0, 0);
        }
        let hi = ((self.w - 1 + p - j) / s + 1).min(self.ow);
        (lo.min(hi), hi)
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Batch-wide patch matrix `[C·KH·KW, N·OH·OW]`, zeros where the kernel
    /// overlaps the padding.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        let cols = self.n * ohw;
        let mut col = vec![0.0; self.rows() * cols];
        self.for_each_span(|row, s, r, lo, hi, xoff| {
            let dst = row * cols + s * ohw + r * self.ow;
            let base = s * self.c * hw + xoff;
            if self.stride[1] == 1 {
                col[dst + lo..dst + hi].copy_from_slice(&x[base..base + hi - lo]);
            } else {
                for (t, cc) in (lo..hi).enumerate() {
                    col[dst + cc] = x[base + t * self.stride[1]];
                }
            }
        });
        col
    }

    /// Adds a patch-matrix gradient back onto the input layout.
    fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        let cols = self.n * ohw;
        self.for_each_span(|row, s, r, lo, hi, xoff| {
            let src = row * cols + s * ohw + r * self.ow;
            let base = s * self.c * hw + xoff;
            if self.stride[1] == 1 {
                for (d, v) in gx[base..base + hi - lo].iter_mut().zip(&col[src + lo..src + hi]) {
                    *d += v;
                }
            } else {
                for (t, cc) in (lo..hi).enumerate() {
                    gx[base + t * self.stride[1]] += col[src + cc];
                }
            }
        });
    }

    /// Visits every in-bounds run of output columns `[lo, hi)` for patch row
    /// `row`, sample `s` and output row `r`; `xoff` is the offset of the first
    /// input element within the sample.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let hw = self.h * self.w;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let (lo, hi) = self.col_range(j);
                    if lo >= hi {
                        continue;
                    }
                    for s in 0..self.n {
                        for r in 0..self.oh {
                            let Some(ir) = self.in_row(r, i) else { continue };
                            let xoff = c * hw + ir * self.w + lo * self.stride[1] + j - self.pad[1];
                            f(row, s, r, lo, hi, xoff);
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Tensor {
        let ohw = self.oh * self.ow;
        let (rows, cols) = (self.rows(), self.n * ohw);
        let y = gemm_nn(k, &self.im2col(x), self.o, rows, cols);
        let mut out = vec![0.0; self.n * self.o * ohw];
        for s in 0..self.n {
            for o in 0..self.o {
                let b = bias.map_or(0.0, |b| b[o]);
                let src = &y[o * cols + s * ohw..o * cols + (s + 1) * ohw];
                for (d, v) in out[(s * self.o + o) * ohw..(s * self.o + o + 1) * ohw]
                    .iter_mut()
                    .zip(src)
                {
                    *d = b + v;
                }
            }
        }
        Tensor::from_parts(vec![self.n, self.o, self.oh, self.ow], out)
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        g: &[f64],
        want_x: bool,
        want_k: bool,
        want_b: bool,
    ) -> Vec<Option<Tensor>> {
        let ohw = self.oh * self.ow;
        let (rows, cols) = (self.rows(), self.n * ohw);
        // output gradient as [O, N·OH·OW]
        let mut gy = vec![0.0; self.o * cols];
        for s in 0..self.n {
            for o in 0..self.o {
                gy[o * cols + s * ohw..o * cols + (s + 1) * ohw]
                    .copy_from_slice(&g[(s * self.o + o) * ohw..(s * self.o + o + 1) * ohw]);
            }
        }
        let gk = want_k.then(|| {
            let gk = gemm_nt(&gy, &self.im2col(x), self.o, cols, rows);
            Tensor::from_parts(vec![self.o, self.c, self.kh, self.kw], gk)
        });
        let gx = want_x.then(|| {
            let gcol = gemm_tn(k, &gy, self.o, rows, cols);
            let mut gx = vec![0.0; x.len()];
            self.col2im(&gcol, &mut gx);
            Tensor::from_parts(vec![self.n, self.c, self.h, self.w], gx)
        });
        let gb = want_b.then(|| {
            let acc = (0..self.o).map(|o| gy[o * cols..(o + 1) * cols].iter().sum()).collect();
            Tensor::from_parts(vec![self.o], acc)
        });
        vec![gx, gk, gb]
    }
}

struct PoolGeometry {
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    window: [usize; 2],
    stride: [usize; 2],
    shape: Vec<usize>,
}

impl PoolGeometry {
    fn new(kind: &OpKind, x: &Tensor, window: [usize; 2], stride: [usize; 2]) -> Result<Self> {
        if x.shape().len() != 4 {
            return Err(mismatch(kind, &[x]));
        }
        if window.contains(&0) || stride.contains(&0) {
            return Err(Error::Invalid("maxpool2d window and stride must be positive".into()));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h < window[0] || w < window[1] {
            return Err(shape_err(
                kind.name(),
                format!("window {window:?} larger than input {:?}", x.shape()),
            ));
        }
        let oh = (h - window[0]) / stride[0] + 1;
        let ow = (w - window[1]) / stride[1] + 1;
        Ok(Self {
            planes: x.shape()[0] * x.shape()[1],
            h,
            w,
            oh,
            ow,
            window,
            stride,
            shape: vec![x.shape()[0], x.shape()[1], oh, ow],
        })
    }

    /// Pooled values plus the flat input index each one came from.
    fn forward(&self, x: &[f64]) -> (Tensor, Vec<usize>) {
        let total = self.planes * self.oh * self.ow;
        let mut out = Vec::with_capacity(total);
        let mut arg = Vec::with_capacity(total);
        for p in 0..self.planes {
            let base = p * self.h * self.w;
            for r in 0..self.oh {
                for col in 0..self.ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for i in 0..self.window[0] {
                        let row = r * self.stride[0] + i;
                        for j in 0..self.window[1] {
                            let idx = base + row * self.w + col * self.stride[1] + j;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
        (Tensor::from_parts(self.shape.clone(), out), arg)
    }
}
