//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value. Because a node's
//! inputs always exist before it does, insertion order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp on `sqrt(|x|)` in the signed square-root derivative.
pub const SIGNED_SQRT_GRAD_FLOOR: f64 = 1e-6;
/// Norm floor for L2 normalization.
pub const L2_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Leaf {
    /// A trainable tensor, by parameter name.
    Parameter(String),
    /// Data fed to the model (features, one-hots, question encodings).
    Input(String),
}

/// How [`Graph::l2_normalize`] groups values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroup {
    /// The whole tensor is one vector.
    Whole,
    /// Leading axis is channels; each remaining position is normalized on its own.
    PerLocation,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Leaf),
    Add(Var, Var),
    Mul(Var, Var),
    /// `vec` has shape `[C]`, `grid` has shape `[C, ...]`.
    MulBroadcast {
        vec: Var,
        grid: Var,
    },
    MaskMul(Var, Vec<f64>),
    Scale(Var, f64),
    SignedSqrt(Var),
    L2Normalize(Var, NormGroup),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    Attend {
        features: Var,
        alpha: Var,
    },
    Concat(Vec<Var>),
    Row {
        table: Var,
        index: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
    Mean(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::MaskMul(..) => "dropout",
            Op::Scale(..) => "scale",
            Op::SignedSqrt(_) => "signed_sqrt",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Linear { .. } => "linear",
            Op::Softmax(_) => "softmax",
            Op::Attend { .. } => "attend",
            Op::Concat(_) => "concat",
            Op::Row { .. } => "embedding",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node reachable from it.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn reached(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn signed_sqrt_value(x: f64) -> f64 {
    // signum(0.0) is 1.0, so zero is special-cased to keep -0.0/0.0 symmetric
    if x == 0.0 {
        x
    } else {
        x.signum() * x.abs().sqrt()
    }
}

/// Max-subtracted softmax over every value in the slice.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Leaves recorded so far, in insertion order.
    pub fn leaves(&self) -> impl Iterator<Item = (Var, &Leaf)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Leaf(l) => Some((Var(i), l)),
            _ => None,
        })
    }

    /// Operation names in insertion order, for structural assertions.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(Op::Leaf(Leaf::Parameter(name.into())), value)
    }

    pub fn input(&mut self, label: impl Into<String>, value: Tensor) -> Var {
        self.push(Op::Leaf(Leaf::Input(label.into())), value)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Elementwise product. A `[C]` vector fuses with a `[C, ...]` tensor by
    /// replication over the trailing axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
            let value = Tensor::new(sa, data)?;
            return Ok(self.push(Op::Mul(a, b), value));
        }
        let (vec, grid) = if sa.len() == 1 && sb.len() >= 2 && sb[0] == sa[0] {
            (a, b)
        } else if sb.len() == 1 && sa.len() >= 2 && sa[0] == sb[0] {
            (b, a)
        } else {
            return Err(Error::shape("mul", &sa, &sb));
        };
        let (vv, vg) = (self.value(vec), self.value(grid));
        let cols = vg.columns();
        let mut data = vg.data().to_vec();
        for (c, scale) in vv.data().iter().enumerate() {
            for v in &mut data[c * cols..(c + 1) * cols] {
                *v *= scale;
            }
        }
        let value = Tensor::new(vg.shape().to_vec(), data)?;
        Ok(self.push(Op::MulBroadcast { vec, grid }, value))
    }

    /// Multiplies by a fixed mask; used for dropout.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != mask.len() {
            return Err(Error::shape("dropout", vx.shape(), &[mask.len()]));
        }
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::MaskMul(x, mask), value))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn signed_sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::SignedSqrt(x), signed_sqrt_value)
    }

    /// `x / max(||x||, 1e-12)`, per group.
    pub fn l2_normalize(&mut self, x: Var, group: NormGroup) -> Var {
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        match group {
            NormGroup::Whole => {
                let n = data.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
                data.iter_mut().for_each(|v| *v /= n);
            }
            NormGroup::PerLocation => {
                let (channels, cols) = (vx.shape().first().copied().unwrap_or(1), vx.columns());
                for l in 0..cols {
                    let n = (0..channels)
                        .map(|c| data[c * cols + l].powi(2))
                        .sum::<f64>()
                        .sqrt()
                        .max(L2_EPS);
                    for c in 0..channels {
                        data[c * cols + l] /= n;
                    }
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(Op::L2Normalize(x, group), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `W x + b` applied at every trailing position of `x`.
    ///
    /// `x: [C_in, ...]`, `w: [C_out, C_in]`, `b: [C_out]`. With a rank-1 `x`
    /// this is an ordinary affine map; with `[C, N, M]` it is a 1x1 convolution.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vw.rank() != 2 || vx.rank() == 0 || vw.shape()[1] != vx.shape()[0] {
            return Err(Error::shape("linear", vw.shape(), vx.shape()));
        }
        let (c_out, c_in) = (vw.shape()[0], vw.shape()[1]);
        if vb.shape() != [c_out] {
            return Err(Error::shape("linear bias", vb.shape(), &[c_out]));
        }
        let cols = vx.columns();
        let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![0.0; c_out * cols];
        for o in 0..c_out {
            let row = &mut out[o * cols..(o + 1) * cols];
            row.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..c_in {
                let wv = wd[o * c_in + c];
                if wv == 0.0 {
                    continue;
                }
                let xs = &xd[c * cols..(c + 1) * cols];
                for (r, xv) in row.iter_mut().zip(xs) {
                    *r += wv * xv;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = c_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    /// Softmax over every element, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), softmax_slice(vx.data())).expect("same shape");
        self.push(Op::Softmax(x), value)
    }

    /// `out_c = sum_l alpha_l * features[c, l]`.
    ///
    /// `alpha` must sum to one within 1e-6.
    pub fn attend(&mut self, features: Var, alpha: Var) -> Result<Var> {
        let (vf, va) = (self.value(features), self.value(alpha));
        let cols = vf.columns();
        if vf.rank() < 2 || va.numel() != cols {
            return Err(Error::shape("attend", vf.shape(), va.shape()));
        }
        let total = va.sum();
        if (total - 1.0).abs() > 1e-6 || va.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "attention weights must be a distribution (sum {total})"
            )));
        }
        let channels = vf.shape()[0];
        let (fd, ad) = (vf.data(), va.data());
        let out = (0..channels)
            .map(|c| fd[c * cols..(c + 1) * cols].iter().zip(ad).map(|(f, a)| f * a).sum())
            .collect();
        let value = Tensor::vector(out);
        Ok(self.push(Op::Attend { features, alpha }, value))
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::shape("concat", v.shape(), &[v.numel()]));
            }
            data.extend_from_slice(v.data());
        }
        if data.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    /// Row `index` of a `[V, D]` table.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::Rank {
                expected: 2,
                actual: vt.rank(),
            });
        }
        let (rows, dim) = (vt.shape()[0], vt.shape()[1]);
        if index >= rows {
            return Err(Error::OutOfVocabulary { id: index, size: rows });
        }
        let value = Tensor::vector(vt.data()[index * dim..(index + 1) * dim].to_vec());
        Ok(self.push(Op::Row { table, index }, value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// `-log softmax(logits)[target]` for rank-1 logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 1 {
            return Err(Error::Rank {
                expected: 1,
                actual: vl.rank(),
            });
        }
        if target >= vl.numel() {
            return Err(Error::OutOfVocabulary {
                id: target,
                size: vl.numel(),
            });
        }
        let loss = -log_softmax(vl.data())[target];
        Ok(self.push(Op::CrossEntropy { logits, target }, Tensor::scalar(loss)))
    }

    /// Elementwise mean of same-shape tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("mean of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).numel()];
        for &p in parts {
            let v = self.value(p);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("mean", &shape, v.shape()));
            }
            acc.iter_mut().zip(v.data()).for_each(|(a, x)| *a += x);
        }
        let k = parts.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        let value = Tensor::new(shape, acc)?;
        Ok(self.push(Op::Mean(parts.to_vec()), value))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> &'g mut [f64] {
        let n = self.nodes[var.0].value.numel();
        grads[var.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                self.acc(grads, *a)
                    .iter_mut()
                    .zip(g.iter().zip(&vb))
                    .for_each(|(d, (gv, y))| *d += gv * y);
                self.acc(grads, *b)
                    .iter_mut()
                    .zip(g.iter().zip(&va))
                    .for_each(|(d, (gv, x))| *d += gv * x);
            }
            Op::MulBroadcast { vec, grid } => {
                let vv = self.value(*vec).data().to_vec();
                let vg = self.value(*grid);
                let cols = vg.columns();
                let gdata = vg.data().to_vec();
                let dv = self.acc(grads, *vec);
                for c in 0..vv.len() {
                    dv[c] += (0..cols).map(|l| g[c * cols + l] * gdata[c * cols + l]).sum::<f64>();
                }
                let dg = self.acc(grads, *grid);
                for c in 0..vv.len() {
                    for l in 0..cols {
                        dg[c * cols + l] += g[c * cols + l] * vv[c];
                    }
                }
            }
            Op::MaskMul(x, mask) => {
                self.acc(grads, *x)
                    .iter_mut()
                    .zip(g.iter().zip(mask))
                    .for_each(|(d, (gv, m))| *d += gv * m);
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x).iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s);
            }
            Op::SignedSqrt(x) => {
                let vx = self.value(*x).data().to_vec();
                self.acc(grads, *x)
                    .iter_mut()
                    .zip(g.iter().zip(&vx))
                    .for_each(|(d, (gv, xv))| *d += gv / (2.0 * xv.abs().sqrt().max(SIGNED_SQRT_GRAD_FLOOR)));
            }
            Op::L2Normalize(x, group) => {
                let vx = self.value(*x);
                let xd = vx.data().to_vec();
                let y = out.data();
                let (channels, cols) = match group {
                    NormGroup::Whole => (xd.len(), 1),
                    NormGroup::PerLocation => (vx.shape()[0], vx.columns()),
                };
                let dx = self.acc(grads, *x);
                for l in 0..cols {
                    let idx = |c: usize| c * cols + l;
                    let norm = (0..channels).map(|c| xd[idx(c)].powi(2)).sum::<f64>().sqrt();
                    if norm >= L2_EPS {
                        let dot: f64 = (0..channels).map(|c| y[idx(c)] * g[idx(c)]).sum();
                        for c in 0..channels {
                            dx[idx(c)] += (g[idx(c)] - y[idx(c)] * dot) / norm;
                        }
                    } else {
                        for c in 0..channels {
                            dx[idx(c)] += g[idx(c)] / L2_EPS;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data().to_vec();
                self.acc(grads, *x)
                    .iter_mut()
                    .zip(g.iter().zip(&vx))
                    .for_each(|(d, (gv, xv))| {
                        if *xv > 0.0 {
                            *d += gv
                        }
                    });
            }
            Op::Tanh(x) => {
                self.acc(grads, *x)
                    .iter_mut()
                    .zip(g.iter().zip(out.data()))
                    .for_each(|(d, (gv, y))| *d += gv * (1.0 - y * y));
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x)
                    .iter_mut()
                    .zip(g.iter().zip(out.data()))
                    .for_each(|(d, (gv, y))| *d += gv * y * (1.0 - y));
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (c_out, c_in) = (vw.shape()[0], vw.shape()[1]);
                let cols = vx.columns();
                let xd = vx.data().to_vec();
                let wd = vw.data().to_vec();
                {
                    let db = self.acc(grads, *b);
                    for o in 0..c_out {
                        db[o] += g[o * cols..(o + 1) * cols].iter().sum::<f64>();
                    }
                }
                {
                    let dw = self.acc(grads, *w);
                    for o in 0..c_out {
                        let go = &g[o * cols..(o + 1) * cols];
                        for c in 0..c_in {
                            let xs = &xd[c * cols..(c + 1) * cols];
                            dw[o * c_in + c] += go.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                let dx = self.acc(grads, *x);
                for o in 0..c_out {
                    let go = &g[o * cols..(o + 1) * cols];
                    for c in 0..c_in {
                        let wv = wd[o * c_in + c];
                        if wv == 0.0 {
                            continue;
                        }
                        for (d, gv) in dx[c * cols..(c + 1) * cols].iter_mut().zip(go) {
                            *d += wv * gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = out.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                self.acc(grads, *x)
                    .iter_mut()
                    .zip(y.iter().zip(g))
                    .for_each(|(d, (yv, gv))| *d += yv * (gv - dot));
            }
            Op::Attend { features, alpha } => {
                let vf = self.value(*features);
                let cols = vf.columns();
                let fd = vf.data().to_vec();
                let ad = self.value(*alpha).data().to_vec();
                let channels = g.len();
                {
                    let da = self.acc(grads, *alpha);
                    for c in 0..channels {
                        for l in 0..cols {
                            da[l] += g[c] * fd[c * cols + l];
                        }
                    }
                }
                let df = self.acc(grads, *features);
                for c in 0..channels {
                    for l in 0..cols {
                        df[c * cols + l] += g[c] * ad[l];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p)
                        .iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(d, gv)| *d += gv);
                    offset += n;
                }
            }
            Op::Row { table, index } => {
                let dim = self.shape(*table)[1];
                self.acc(grads, *table)[index * dim..(index + 1) * dim]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gv)| *d += gv);
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.acc(grads, *x).iter_mut().for_each(|d| *d += gv);
            }
            Op::CrossEntropy { logits, target } => {
                let p = softmax_slice(self.value(*logits).data());
                let gv = g[0];
                let dl = self.acc(grads, *logits);
                for (k, pk) in p.iter().enumerate() {
                    let indicator = if k == *target { 1.0 } else { 0.0 };
                    dl[k] += gv * (pk - indicator);
                }
            }
            Op::Mean(parts) => {
                let k = parts.len() as f64;
                for &p in parts {
                    self.acc(grads, p).iter_mut().zip(g).for_each(|(d, gv)| *d += gv / k);
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
    }
}
