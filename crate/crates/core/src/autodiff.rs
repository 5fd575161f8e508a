//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation in execution order. [`Tape::backward`]
//! walks the records in reverse, accumulating adjoints. Parameters bound with
//! [`Tape::with_params`] occupy the first node slots so a [`ParamId`] maps
//! directly onto its [`Var`].

use crate::error::{Error, Result};
use crate::geometry::RoiSample;
use crate::layers::{self, Conv2dParams, PoolIndices};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    LogClamp(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Pick(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        p: Conv2dParams,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Var,
        p: Conv2dParams,
    },
    MaxPool(Var, PoolIndices),
    MaxUnpool(Var, PoolIndices),
    MaskMul(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RoiAlign(Var, Vec<RoiSample>),
    SigmoidBce {
        logits: Var,
        target: Vec<f64>,
        positive_only: bool,
    },
    SmoothL1(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass. One tape per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        self.get(Var(id.index()))
    }

    pub fn param_slice(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.index()].as_deref()
    }

    /// Gradients of the first `n_params` nodes, i.e. the bound parameters.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Vec<f64>>> {
        self.grads.truncate(n_params);
        self.grads
    }
}

/// `max(v, lo)` that lets NaN through.
pub(crate) fn clamp_below(v: f64, lo: f64) -> f64 {
    if v < lo {
        lo
    } else {
        v
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_scaled(slot: &mut Option<Vec<f64>>, delta: &[f64], s: f64) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += s * d),
        None => *slot = Some(delta.iter().map(|d| s * d).collect()),
    }
}

/// `a[m×k] · b[k×n]`, or matrix-vector when `b` is 1-D.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some((*m, *k, *n, vec![*m, *n])),
        ([m, k], [k2]) if k == k2 => Some((*m, *k, 1, vec![*m])),
        _ => None,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose first `store.len()` nodes are the store's parameters.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut tape = Self::new();
        for t in store.values() {
            tape.push(t.clone(), Op::Leaf, true);
        }
        tape.n_params = store.len();
        tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.index() < self.n_params, "parameter not bound on this tape");
        Var(id.index())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, shape) = matmul_dims(ta.shape(), tb.shape())
            .ok_or_else(|| Error::dim("matmul", ta.shape(), tb.shape()))?;
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds vector `b` along the trailing dimension of `x`. This is the only
    /// broadcasting the tape supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.ndim() != 1 || tb.len() != n {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        Ok(self.push_op(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push_op(value, Op::Scale(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push_op(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push_op(value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push_op(value, Op::Exp(x), &[x])
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let value = self.value(x).map(|v| clamp_below(v, eps).ln());
        self.push_op(value, Op::LogClamp(x, eps), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op(value, Op::Mean(x), &[x])
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::contract("add_all of no terms"))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let last = self.value(x).ndim() - 1;
        self.softmax_axis(x, last)
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let alen = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mx = (0..alen)
                    .map(|a| d[base + a * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for a in 0..alen {
                    let e = (d[base + a * inner] - mx).exp();
                    d[base + a * inner] = e;
                    s += e;
                }
                for a in 0..alen {
                    d[base + a * inner] /= s;
                }
            }
        }
        let op = Op::Softmax {
            x,
            outer,
            axis: alen,
            inner,
        };
        Ok(self.push_op(out, op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .shape()
            .to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != first[1..] {
                return Err(Error::dim("concat", &first, t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Gather flat elements of `x` into a 1-D tensor.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::contract(format!(
                "pick index {bad} out of range for {} elements",
                t.len()
            )));
        }
        if indices.is_empty() {
            return Err(Error::contract("pick of no indices"));
        }
        let value = Tensor::vector(indices.iter().map(|&i| t.data()[i]).collect());
        Ok(self.push_op(value, Op::Pick(x, indices.to_vec()), &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, p: &Conv2dParams) -> Result<Var> {
        let value = layers::conv2d_forward(self.value(x), self.value(w), self.value(b), p)?;
        let op = Op::Conv2d {
            x,
            w,
            b,
            p: p.clone(),
        };
        Ok(self.push_op(value, op, &[x, w, b]))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, p: &Conv2dParams) -> Result<Var> {
        let value = layers::deconv2d_forward(self.value(x), self.value(w), self.value(b), p)?;
        let op = Op::Deconv2d {
            x,
            w,
            b,
            p: p.clone(),
        };
        Ok(self.push_op(value, op, &[x, w, b]))
    }

    pub fn maxpool(&mut self, x: Var, spec: layers::PoolSpec) -> Result<(Var, PoolIndices)> {
        let (value, idx) = layers::maxpool_forward(self.value(x), spec)?;
        let v = self.push_op(value, Op::MaxPool(x, idx.clone()), &[x]);
        Ok((v, idx))
    }

    pub fn maxunpool(&mut self, y: Var, idx: &PoolIndices) -> Result<Var> {
        let value = layers::maxunpool_forward(self.value(y), idx)?;
        Ok(self.push_op(value, Op::MaxUnpool(y, idx.clone()), &[y]))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::dim("mask_mul", t.shape(), &[mask.len()]));
        }
        let mut value = t.clone();
        value
            .data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, m)| *v *= m);
        Ok(self.push_op(value, Op::MaskMul(x, mask), &[x]))
    }

    /// Per-feature normalization of `x[batch×features]` with batch statistics.
    /// Returns the output with the batch mean and (biased) variance.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let [batch, feat] = t.shape() else {
            return Err(Error::dim("batchnorm", t.shape(), &[0, 0]));
        };
        let (batch, feat) = (*batch, *feat);
        if batch < 2 {
            return Err(Error::contract("batchnorm in train mode needs batch >= 2"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [feat] {
                return Err(Error::Dimension {
                    op: if name == "gamma" { "batchnorm gamma" } else { "batchnorm beta" },
                    lhs: vec![feat],
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let d = t.data();
        let mut mean = vec![0.0; feat];
        let mut var = vec![0.0; feat];
        for r in 0..batch {
            for f in 0..feat {
                mean[f] += d[r * feat + f];
            }
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        for r in 0..batch {
            for f in 0..feat {
                let c = d[r * feat + f] - mean[f];
                var[f] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= batch as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; batch * feat];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; batch * feat];
        for r in 0..batch {
            for f in 0..feat {
                let i = r * feat + f;
                xhat[i] = (d[i] - mean[f]) * inv_std[f];
                out[i] = g[f] * xhat[i] + b[f];
            }
        }
        let value = Tensor::new(vec![batch, feat], out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.push_op(value, op, &[x, gamma, beta]), mean, var))
    }

    pub(crate) fn roi_align_op(&mut self, x: Var, value: Tensor, samples: Vec<RoiSample>) -> Var {
        self.push_op(value, Op::RoiAlign(x, samples), &[x])
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against `target`.
    pub fn sigmoid_bce(&mut self, logits: Var, target: &[f64], positive_only: bool) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != target.len() {
            return Err(Error::dim("sigmoid_bce", t.shape(), &[target.len()]));
        }
        let softplus = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
        let loss: f64 = t
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &y)| {
                if positive_only {
                    y * softplus(-x)
                } else {
                    y * softplus(-x) + (1.0 - y) * softplus(x)
                }
            })
            .sum();
        let op = Op::SigmoidBce {
            logits,
            target: target.to_vec(),
            positive_only,
        };
        Ok(self.push_op(Tensor::scalar(loss), op, &[logits]))
    }

    /// `Σ smooth_l1(a_i − b_i)` with the standard `|x| − 0.5` outer branch.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("smooth_l1", ta, tb)?;
        let loss = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| smooth_l1_scalar(x - y))
            .sum();
        Ok(self.push_op(Tensor::scalar(loss), Op::SmoothL1(a, b), &[a, b]))
    }

    /// Adjoints of `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Non-differentiable leaves never hold a gradient.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n, _) = matmul_dims(ta.shape(), tb.shape()).expect("checked");
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[r * k + p] = brow.iter().zip(&g[r * n..(r + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += av * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate_scaled(&mut grads[b.0], g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Scale(x, s) => accumulate_scaled(&mut grads[x.0], g, *s),
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::LogClamp(x, eps) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > *eps { g / v } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(&mut grads[x.0], &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(&mut grads[x.0], &vec![g[0] / n as f64; n]);
            }
            Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => {
                let mut d = vec![0.0; out.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * axis * inner + i;
                        let dot: f64 = (0..*axis)
                            .map(|a| g[base + a * inner] * out[base + a * inner])
                            .sum();
                        for a in 0..*axis {
                            let k = base + a * inner;
                            d[k] = out[k] * (g[k] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Pick(x, idx) => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &k) in g.iter().zip(idx) {
                    d[k] += gv;
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::Conv2d { x, w, b, p } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let (dx, dw, db) = layers::conv2d_backward(self.value(*x), self.value(*w), p, &gt, self.wants(*x));
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx.data());
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], dw.data());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], db.data());
                }
            }
            Op::Deconv2d { x, w, b, p } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let (dx, dw, db) = layers::deconv2d_backward(self.value(*x), self.value(*w), p, &gt);
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dx.data());
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], dw.data());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], db.data());
                }
            }
            Op::MaxPool(x, idx) => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &k) in g.iter().zip(idx.indices()) {
                    d[k] += gv;
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::MaxUnpool(y, idx) => {
                let d: Vec<f64> = idx.indices().iter().map(|&k| g[k]).collect();
                accumulate(&mut grads[y.0], &d);
            }
            Op::MaskMul(x, mask) => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let feat = inv_std.len();
                let batch = xhat.len() / feat;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; feat];
                let mut dbeta = vec![0.0; feat];
                let mut sum_dxhat = vec![0.0; feat];
                let mut sum_dxhat_xhat = vec![0.0; feat];
                for r in 0..batch {
                    for f in 0..feat {
                        let k = r * feat + f;
                        dgamma[f] += g[k] * xhat[k];
                        dbeta[f] += g[k];
                        let dxh = g[k] * gam[f];
                        sum_dxhat[f] += dxh;
                        sum_dxhat_xhat[f] += dxh * xhat[k];
                    }
                }
                if self.wants(*x) {
                    let nb = batch as f64;
                    let mut dx = vec![0.0; batch * feat];
                    for r in 0..batch {
                        for f in 0..feat {
                            let k = r * feat + f;
                            let dxh = g[k] * gam[f];
                            dx[k] = inv_std[f] / nb
                                * (nb * dxh - sum_dxhat[f] - xhat[k] * sum_dxhat_xhat[f]);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], &dgamma);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], &dbeta);
                }
            }
            Op::RoiAlign(x, samples) => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, s) in g.iter().zip(samples) {
                    for &(k, w) in &s.corners {
                        d[k] += gv * w;
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::SigmoidBce {
                logits,
                target,
                positive_only,
            } => {
                let d: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&x, &y)| {
                        let s = sigmoid(x);
                        let dl = if *positive_only { -y * (1.0 - s) } else { s - y };
                        g[0] * dl
                    })
                    .collect();
                accumulate(&mut grads[logits.0], &d);
            }
            Op::SmoothL1(a, b) => {
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| g[0] * smooth_l1_slope(x - y))
                    .collect();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    accumulate_scaled(&mut grads[b.0], &d, -1.0);
                }
            }
        }
    }
}

pub(crate) fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
