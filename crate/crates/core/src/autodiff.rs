//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is created per forward invocation. Every op appends one node,
//! so node order is forward execution order, and [`Tape::backward`] walks the
//! nodes in reverse, visiting each one once. Gradients come back as a
//! [`Gradients`] table keyed by [`Var`]; accumulating them into parameter
//! buffers is explicit (see [`crate::nn::ParamSet::accumulate`]), so calling
//! `backward` twice and accumulating twice doubles the stored gradient until
//! `zero_grads` is called.
//!
//! Only first-order gradients are supported.

use std::rc::Rc;

use crate::attention::rotate_rows;
use crate::tensor::{matmul_into, transpose, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<f64> },
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Rc<[usize]> },
    ScatterRows { x: Var, idx: Rc<[usize]> },
    Rope { x: Var, positions: Rc<[f64]>, head_dim: usize, theta: f64 },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape()[t.rank() - 1]
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub const RMS_EPS: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a leaf. The tensor's own `requires_grad` flag decides whether
    /// a gradient is tracked for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn variable(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = last_dim(ta);
        if tb.numel() != n {
            return Err(shape_err(name, ta, tb));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    /// `a + b` with `b` a vector broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast(a, b, "add_row", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// `a ⊙ b` with `b` a vector broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast(a, b, "mul_row", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MulRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a constant tensor (no gradient flows into `c`).
    pub fn shift(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(a).zip_map(c, |x, y| x + y)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Shift(a), ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Shift(a), ng)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: t.rank(),
            });
        }
        let out = softmax_along(t, axis, None)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Softmax { x: a, axis }, ng))
    }

    /// Softmax over the last axis of a rank-2 tensor where `allowed[i*cols+j]`
    /// false excludes entry `j` of row `i`. Rows with nothing allowed error.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(a);
        t.dims2()?;
        if allowed.len() != t.numel() {
            return Err(TensorError::Length {
                shape: t.shape().to_vec(),
                len: allowed.len(),
            });
        }
        let out = softmax_along(t, 1, Some(allowed))?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Softmax { x: a, axis: 1 }, ng))
    }

    /// Root-mean-square normalisation over the last axis, times `scale`.
    pub fn rmsnorm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        let n = last_dim(tx);
        if ts.numel() != n {
            return Err(shape_err("rmsnorm", tx, ts));
        }
        let rows = tx.numel() / n;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = vec![0.0; tx.numel()];
        let (xd, sd) = (tx.data(), ts.data());
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                out[r * n + j] = row[j] * inv * sd[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, scale]);
        Ok(self.push(out, Op::RmsNorm { x, scale, inv_rms }, ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(&[a]);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if start + len > c || len == 0 {
            return Err(TensorError::Index {
                index: start + len,
                extent: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(&[r, len], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SliceCols { x: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(&[r, total], data)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SliceRows { x: a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index { index: i, extent: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::GatherRows { x: a, idx: idx.into() }, ng))
    }

    /// Places input row `i` at output row `idx[i]` of a zero matrix with
    /// `rows` rows. `idx` must not repeat.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if r != idx.len() {
            return Err(TensorError::Index {
                index: idx.len(),
                extent: r,
            });
        }
        let mut data = vec![0.0; rows * c];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(TensorError::Index {
                    index: dst,
                    extent: rows,
                });
            }
            data[dst * c..(dst + 1) * c].copy_from_slice(t.row(i));
        }
        let out = Tensor::new(&[rows, c], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::ScatterRows { x: a, idx: idx.into() }, ng))
    }

    /// Rotary encoding of a `[rows, heads * head_dim]` tensor; row `i` is
    /// rotated by position `positions[i]`.
    pub fn rope(&mut self, a: Var, positions: &[f64], head_dim: usize, theta: f64) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if !head_dim.is_multiple_of(2) {
            return Err(TensorError::OddHeadDim(head_dim));
        }
        if positions.len() != r || c % head_dim != 0 {
            return Err(TensorError::Length {
                shape: t.shape().to_vec(),
                len: positions.len(),
            });
        }
        let mut data = t.data().to_vec();
        rotate_rows(&mut data, c, positions, head_dim, theta, 1.0);
        let out = Tensor::new(&[r, c], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(
            out,
            Op::Rope {
                x: a,
                positions: positions.into(),
                head_dim,
                theta,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Errors if any value of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &'static str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what))
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("gradient"));
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.nodes[a.0].needs_grad {
                    let bt = transpose(tb.data(), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    self.acc(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose(ta.data(), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = out.dims2()?;
                self.acc(grads, *a, transpose(g, r, c));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
                self.acc(grads, *b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).numel();
                self.acc(grads, *a, g.to_vec());
                let mut gb = vec![0.0; n];
                g.iter().enumerate().for_each(|(i, v)| gb[i % n] += v);
                self.acc(grads, *b, gb);
            }
            Op::MulRow(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let n = bd.len();
                self.acc(grads, *a, g.iter().enumerate().map(|(i, v)| v * bd[i % n]).collect());
                let mut gb = vec![0.0; n];
                g.iter().enumerate().for_each(|(i, v)| gb[i % n] += v * ad[i]);
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Shift(a) | Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (xd, sd) = (self.value(*x).data(), self.value(*scale).data());
                let n = sd.len();
                let mut gx = vec![0.0; xd.len()];
                let mut gs = vec![0.0; n];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = &xd[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    // y_j = x_j * inv * s_j ; d inv / d x_k = -inv^3 x_k / n
                    let dot: f64 = (0..n).map(|j| gr[j] * sd[j] * row[j]).sum();
                    for j in 0..n {
                        gs[j] += gr[j] * row[j] * inv;
                        gx[r * n + j] = gr[j] * sd[j] * inv - inv * inv * inv * row[j] * dot / n as f64;
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *scale, gs);
            }
            Op::Silu(a) => {
                let ad = self.value(*a).data();
                let gx = g
                    .iter()
                    .zip(ad)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *a, gx);
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(ad).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(ad).map(|(g, &x)| g * sigmoid(x)).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let (_, w) = out.dims2()?;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    self.acc(grads, p, gp);
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut gx = vec![0.0; r * c];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut gx = vec![0.0; r * c];
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[i * c + j];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ScatterRows { x, idx } => {
                let (_, c) = out.dims2()?;
                let mut gx = Vec::with_capacity(idx.len() * c);
                for &dst in idx.iter() {
                    gx.extend_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                theta,
            } => {
                let (_, c) = out.dims2()?;
                let mut gx = g.to_vec();
                rotate_rows(&mut gx, c, positions, *head_dim, *theta, -1.0);
                self.acc(grads, *x, gx);
            }
        }
        Ok(())
    }
}

/// `(outer, axis_len, inner)` strides for iterating one axis.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_along(t: &Tensor, axis: usize, allowed: Option<&[bool]>) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(t.shape(), axis);
    let x = t.data();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let ok = |j: usize| allowed.is_none_or(|m| m[base + j * inner]);
            let max = (0..len)
                .filter(|&j| ok(j))
                .map(|j| x[base + j * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::EmptyRow(o * inner + i));
            }
            let mut z = 0.0;
            for j in (0..len).filter(|&j| ok(j)) {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                z += e;
            }
            for j in 0..len {
                y[base + j * inner] /= z;
            }
        }
    }
    Tensor::new(t.shape(), y)
}

/// Softmax of a plain tensor along `axis`, outside any tape.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(TensorError::Axis {
            axis,
            rank: t.rank(),
        });
    }
    softmax_along(t, axis, None)
}
