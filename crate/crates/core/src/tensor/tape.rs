use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRowBias(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    ConcatCols(Vec<usize>),
    ConcatChannels(Vec<usize>),
    GlobalAvgPool(usize),
    Conv2d(usize, usize, ConvGeom),
    Depthwise(usize, usize, ConvGeom),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape lives for one forward/backward pass. Parameters enter through
/// [`Tape::param`] (gradient tracked) and data through [`Tape::constant`].
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx]))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, idx: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    fn derived(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(value, op, needs)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.idx];
        if root.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only gradients of tracked tensors are meaningful to callers.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Grads { grads, shapes })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    idx: usize,
    g: Vec<T>,
) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g) {
                *e = *e + v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: nodes[idx].value.shape().to_vec(),
                data: g,
            });
        }
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let gd = g.data();
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gd.to_vec());
            accumulate(nodes, grads, *b, gd.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, gd.to_vec());
            accumulate(nodes, grads, *b, gd.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
            accumulate(nodes, grads, *b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, gd.iter().map(|&v| v * *c).collect());
        }
        Op::AddRowBias(x, b) => {
            let n = val(*b).len();
            let mut db = vec![T::zero(); n];
            for row in gd.chunks(n) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            accumulate(nodes, grads, *x, gd.to_vec());
            accumulate(nodes, grads, *b, db);
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if nodes[*a].needs_grad {
                let mut da = vec![T::zero(); m * k];
                gemm_nt(gd, vb.data(), &mut da, m, n, k);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].needs_grad {
                let mut db = vec![T::zero(); k * n];
                gemm_tn(va.data(), gd, &mut db, k, m, n);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            let d = gd
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            let d = gd
                .iter()
                .zip(y)
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, vec![gd[0]; val(*a).len()]);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![gd[0] / T::of(n as f64); n]);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, gd.to_vec()),
        Op::Gather(a, indices) => {
            let mut d = vec![T::zero(); val(*a).len()];
            for (&i, &v) in indices.iter().zip(gd) {
                d[i] = d[i] + v;
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                }
                accumulate(nodes, grads, p, d);
                offset += w;
            }
        }
        Op::ConcatChannels(parts) => {
            let s = node.value.shape();
            let (n, total, plane) = (s[0], s[1], s[2] * s[3]);
            let mut offset = 0;
            for &p in parts {
                let c = val(p).shape()[1];
                let mut d = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let start = (b * total + offset) * plane;
                    d.extend_from_slice(&gd[start..start + c * plane]);
                }
                accumulate(nodes, grads, p, d);
                offset += c;
            }
        }
        Op::GlobalAvgPool(a) => {
            let s = val(*a).shape().to_vec();
            let plane = s[2] * s[3];
            let inv = T::one() / T::of(plane as f64);
            let mut d = Vec::with_capacity(val(*a).len());
            for &v in gd {
                d.extend(std::iter::repeat_n(v * inv, plane));
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Conv2d(x, w, geom) => {
            let (dx, dw) = geom.conv_backward(val(*x).data(), val(*w).data(), gd);
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
        }
        Op::Depthwise(x, w, geom) => {
            let (dx, dw) = geom.depthwise_backward(val(*x).data(), val(*w).data(), gd);
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let s = val(*x).shape().to_vec();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let m = T::of((n * plane) as f64);
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * plane;
                    for i in o..o + plane {
                        dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + gd[i];
                    }
                }
            }
            if nodes[*x].needs_grad {
                // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        let k = gam[ch] * inv_std[ch] / m;
                        for i in o..o + plane {
                            dx[i] = k * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::ChannelAffine {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let s = val(*x).shape().to_vec();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); gd.len()];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * plane;
                    for i in o..o + plane {
                        dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + gd[i];
                        dx[i] = gd[i] * gam[ch] * inv_std[ch];
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let n = labels.len();
            let c = probs.len() / n;
            let scale = gd[0] / T::of(n as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * c + l] = d[r * c + l] - scale;
            }
            accumulate(nodes, grads, *logits, d);
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.derived(v, op, &[self.idx])
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, &a, &b));
        }
        Ok(())
    }

    fn zip(&self, other: &Var<'t, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "add")?;
        let v = self.zip(other, |a, b| a + b);
        Ok(self.tape.derived(v, Op::Add(self.idx, other.idx), &[self.idx, other.idx]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "sub")?;
        let v = self.zip(other, |a, b| a - b);
        Ok(self.tape.derived(v, Op::Sub(self.idx, other.idx), &[self.idx, other.idx]))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "mul")?;
        let v = self.zip(other, |a, b| a * b);
        Ok(self.tape.derived(v, Op::Mul(self.idx, other.idx), &[self.idx, other.idx]))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        self.unary(|x| x * c, Op::Scale(self.idx, c))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu(self.idx))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            Op::Sigmoid(self.idx),
        )
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.derived(Tensor::scalar(s), Op::Sum(self.idx), &[self.idx])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s = v.sum() / T::of(v.len() as f64);
        self.tape.derived(Tensor::scalar(s), Op::Mean(self.idx), &[self.idx])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.derived(v, Op::Reshape(self.idx), &[self.idx]))
    }

    /// Selects flat elements by index into a tensor of `shape`.
    pub fn gather(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t, T>> {
        let src = self.value();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather", shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = indices.iter().map(|&i| src.data()[i]).collect();
        let v = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.tape.derived(v, Op::Gather(self.idx, indices), &[self.idx]))
    }

    /// Row `r` of a rank-2 value as a 1×F matrix.
    pub fn row(&self, r: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 || r >= s[0] {
            return Err(Error::InvalidArgument(format!("row {r} of shape {s:?}")));
        }
        let idx: Vec<usize> = (r * s[1]..(r + 1) * s[1]).collect();
        self.gather(Rc::new(idx), &[1, s[1]])
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        let v = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self
            .tape
            .derived(v, Op::MatMul(self.idx, other.idx), &[self.idx, other.idx]))
    }

    /// Adds a length-n bias to every row of an m×n value.
    pub fn add_row_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        if x.shape().len() != 2 || b.len() != x.shape()[1] {
            return Err(Error::shape("add_row_bias", x.shape(), b.shape()));
        }
        let n = b.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % n])
            .collect();
        let v = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        Ok(self
            .tape
            .derived(v, Op::AddRowBias(self.idx, bias.idx), &[self.idx, bias.idx]))
    }

    /// Affine map `x·W + b` for x: N×F, W: F×G, b: G.
    pub fn linear(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weight)?.add_row_bias(bias)
    }

    /// Concatenates rank-2 values along columns.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let tape = parts[0].tape;
        let vals: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = vals[0].shape()[0];
        for v in &vals {
            if v.shape().len() != 2 || v.shape()[0] != rows {
                return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
            }
        }
        let total: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let v = Tensor {
            shape: vec![rows, total],
            data,
        };
        Ok(tape.derived(v, Op::ConcatCols(idx.clone()), &idx))
    }

    /// Concatenates N×C×H×W values along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let tape = parts[0].tape;
        let vals: Vec<_> = parts.iter().map(Var::value).collect();
        let s0 = vals[0].shape().to_vec();
        for v in &vals {
            let s = v.shape();
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::shape("concat_channels", &s0, s));
            }
        }
        let total: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let plane = s0[2] * s0[3];
        let mut data = Vec::with_capacity(s0[0] * total * plane);
        for b in 0..s0[0] {
            for v in &vals {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let v = Tensor {
            shape: vec![s0[0], total, s0[2], s0[3]],
            data,
        };
        Ok(tape.derived(v, Op::ConcatChannels(idx.clone()), &idx))
    }

    /// Mean over the spatial axes: N×C×H×W → N×C.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", s, &[0, 0, 0, 0]));
        }
        let plane = s[2] * s[3];
        let inv = T::one() / T::of(plane as f64);
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor {
            shape: vec![s[0], s[1]],
            data,
        };
        Ok(self.tape.derived(v, Op::GlobalAvgPool(self.idx), &[self.idx]))
    }

    fn conv_geom(
        &self,
        weight: &Var<'t, T>,
        stride: usize,
        padding: usize,
        depthwise: bool,
        op: &'static str,
    ) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(), weight.shape());
        let bad = || Error::shape(op, &xs, &ws);
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 || stride == 0 {
            return Err(bad());
        }
        if depthwise {
            if ws[0] != xs[1] || ws[1] != 1 {
                return Err(bad());
            }
        } else if ws[1] != xs[1] {
            return Err(bad());
        }
        let k = ws[2];
        if xs[2] + 2 * padding < k || xs[3] + 2 * padding < k {
            return Err(bad());
        }
        Ok(ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: k,
            stride,
            padding,
        })
    }

    /// NCHW convolution with a Cout×Cin×K×K kernel (K odd).
    pub fn conv2d(&self, weight: &Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let geom = self.conv_geom(weight, stride, padding, false, "conv2d")?;
        let out = geom.conv_forward(self.value().data(), weight.value().data());
        let v = Tensor {
            shape: vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()],
            data: out,
        };
        Ok(self
            .tape
            .derived(v, Op::Conv2d(self.idx, weight.idx, geom), &[self.idx, weight.idx]))
    }

    /// Per-channel convolution with a C×1×K×K kernel.
    pub fn depthwise_conv2d(
        &self,
        weight: &Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let geom = self.conv_geom(weight, stride, padding, true, "depthwise_conv2d")?;
        let out = geom.depthwise_forward(self.value().data(), weight.value().data());
        let v = Tensor {
            shape: vec![geom.batch, geom.in_channels, geom.out_height(), geom.out_width()],
            data: out,
        };
        Ok(self.tape.derived(
            v,
            Op::Depthwise(self.idx, weight.idx, geom),
            &[self.idx, weight.idx],
        ))
    }

    /// Batch-statistics normalization; also returns the per-channel batch
    /// mean and biased variance.
    pub(crate) fn batch_norm_batch_stats(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        let c = self.check_bn(gamma, beta)?;
        let s = x.shape();
        let (n, plane) = (s[0], s[2] * s[3]);
        let m = T::of((n * plane) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                mean[ch] = mean[ch] + x.data()[o..o + plane].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                for &v in &x.data()[o..o + plane] {
                    let d = v - mean[ch];
                    var[ch] = var[ch] + d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = normalize(&x, &mean, &inv_std, &gamma.value(), &beta.value());
        let var_out = self.tape.derived(
            out,
            Op::BatchNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
            &[self.idx, gamma.idx, beta.idx],
        );
        Ok((var_out, mean, var))
    }

    /// Normalization with fixed (moving) statistics.
    pub(crate) fn batch_norm_fixed(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let c = self.check_bn(gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", &[c], &[mean.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = normalize(&self.value(), mean, &inv_std, &gamma.value(), &beta.value());
        Ok(self.tape.derived(
            out,
            Op::ChannelAffine {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
            &[self.idx, gamma.idx, beta.idx],
        ))
    }

    fn check_bn(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Result<usize> {
        let s = self.shape();
        let (g, b) = (gamma.shape(), beta.shape());
        if s.len() != 4 || g != [s[1]] || b != [s[1]] {
            return Err(Error::shape("batch_norm", &s, &g));
        }
        Ok(s[1])
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = x.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss = loss + lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let n = T::of(labels.len() as f64);
        Ok(self.tape.derived(
            Tensor::scalar(loss / n),
            Op::SoftmaxCrossEntropy {
                logits: self.idx,
                probs,
                labels: labels.to_vec(),
            },
            &[self.idx],
        ))
    }
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            for i in o..o + plane {
                xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                out[i] = xhat[i] * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    (
        Tensor {
            shape: s.to_vec(),
            data: out,
        },
        xhat,
    )
}

/// Row-wise softmax of a rank-2 tensor (not recorded).
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[1];
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        data.extend(row.iter().map(|&v| (v - mx).exp() / z));
    }
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}
