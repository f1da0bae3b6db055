//! Computation trace and reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value. Nodes are only
//! ever appended, so node order is a valid topological order and `backward`
//! is a single reverse sweep.

use std::sync::Arc;

use super::kernels;
use super::ops;
use super::tensor::{Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Trace`].
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
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Scores {
        q: Var,
        k: Var,
        mask: Arc<Mask>,
        scale: f64,
    },
    Softmax(Var, Arc<Mask>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    Reshape(Var),
    Clamp(Var, f64, f64),
    Canonical(Var, Vec<bool>),
    Sum(Var),
    Bce(Var, Vec<f64>),
    SmoothL1(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of differentiable operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Trace {
    nodes: Vec<Node>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are kept for it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::dim(op, t.shape(), &[0, 0]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(x), ng))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims("add_row", x)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != n {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| c * v);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::gelu);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// `scale · q kᵀ` at visible positions of `mask`, zero elsewhere.
    pub fn masked_scores(&mut self, q: Var, k: Var, mask: &Arc<Mask>, scale: f64) -> Result<Var> {
        let (n, d) = self.dims("masked_scores", q)?;
        let (m, d2) = self.dims("masked_scores", k)?;
        if d != d2 || (n, m) != (mask.rows(), mask.cols()) {
            return Err(Error::dim("masked_scores", &[n, d, m, d2], &[mask.rows(), mask.cols()]));
        }
        let out = kernels::masked_scores(self.value(q).data(), self.value(k).data(), d, mask, scale);
        let ng = self.ng(&[q, k]);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(
            t,
            Op::Scores {
                q,
                k,
                mask: Arc::clone(mask),
                scale,
            },
            ng,
        ))
    }

    pub fn masked_softmax(&mut self, s: Var, mask: &Arc<Mask>) -> Result<Var> {
        let out = ops::masked_softmax(self.value(s), mask)?;
        let ng = self.ng(&[s]);
        Ok(self.push(out, Op::Softmax(s, Arc::clone(mask)), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let parts = ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let out = Tensor::new(self.shape(x).to_vec(), parts.out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: parts.xhat,
                inv_std: parts.inv_std,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims("slice_rows", x)?;
        if start >= end || end > r {
            return Err(Error::Index { index: end, len: r });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(end - start, c, data)?, Op::SliceRows(x, start), ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims("gather_rows", x)?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(idx.len(), c, out)?, Op::GatherRows(x, idx.to_vec()), ng))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims("select_cols", x)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            for &j in cols {
                if j >= c {
                    return Err(Error::Index { index: j, len: c });
                }
                out.push(src[i * c + j]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(r, cols.len(), out)?, Op::SelectCols(x, cols.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Elementwise clamp; gradient passes only where the input lies in `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.map(x, |v| v.clamp(lo, hi));
        let ng = self.ng(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    /// Sorts each row of an `n×2` matrix so that column 0 ≤ column 1.
    pub fn canonical_pairs(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims("canonical_pairs", x)?;
        if c != 2 {
            return Err(Error::dim("canonical_pairs", self.shape(x), &[n, 2]));
        }
        let src = self.value(x).data();
        let mut out = src.to_vec();
        let mut swapped = vec![false; n];
        for i in 0..n {
            if out[2 * i] > out[2 * i + 1] {
                out.swap(2 * i, 2 * i + 1);
                swapped[i] = true;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(n, 2, out)?, Op::Canonical(x, swapped), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean binary cross-entropy of probabilities `p` against soft `targets`.
    pub fn bce_mean(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let value = ops::bce_mean(self.value(p).data(), targets)?;
        let ng = self.ng(&[p]);
        Ok(self.push(Tensor::scalar(value), Op::Bce(p, targets.to_vec()), ng))
    }

    /// `Σ smoothL1(x_i − target_i)` with transition point 1.
    pub fn smooth_l1_sum(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != targets.len() {
            return Err(Error::dim("smooth_l1", t.shape(), &[targets.len()]));
        }
        let value = t.data().iter().zip(targets).map(|(&a, &b)| ops::smooth_l1(a - b)).sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::SmoothL1(x, targets.to_vec()), ng))
    }

    /// Reverse accumulation from a scalar `loss`. Afterwards every
    /// `requires_grad` leaf holds its gradient (zeros if unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let out = &nodes[idx].value;

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    kernels::matmul_nt_acc(g, val(*b).data(), m, n, k, slot(grads, nodes, *a));
                }
                if wants(*b) {
                    kernels::matmul_tn_acc(val(*a).data(), g, m, k, n, slot(grads, nodes, *b));
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let gx = slot(grads, nodes, *x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        kernels::axpy(1.0, g, slot(grads, nodes, v));
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let gb = val(*b).data();
                    let ga = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * gb[i];
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let gb = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    kernels::axpy(1.0, g, slot(grads, nodes, *x));
                }
                if wants(*bias) {
                    let n = val(*bias).numel();
                    let gb = slot(grads, nodes, *bias);
                    for row in g.chunks(n) {
                        kernels::axpy(1.0, row, gb);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    kernels::axpy(*c, g, slot(grads, nodes, *x));
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let gx = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * ops::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = out.data();
                    let gx = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Scores { q, k, mask, scale } => {
                let d = val(*q).shape()[1];
                let m = mask.cols();
                if wants(*q) {
                    let kv = val(*k).data();
                    let gq = slot(grads, nodes, *q);
                    for i in 0..mask.rows() {
                        let row = &mut gq[i * d..(i + 1) * d];
                        for &j in mask.row_keys(i) {
                            let w = g[i * m + j] * scale;
                            if w != 0.0 {
                                kernels::axpy(w, &kv[j * d..(j + 1) * d], row);
                            }
                        }
                    }
                }
                if wants(*k) {
                    let qv = val(*q).data();
                    let gk = slot(grads, nodes, *k);
                    for i in 0..mask.rows() {
                        let qrow = &qv[i * d..(i + 1) * d];
                        for &j in mask.row_keys(i) {
                            let w = g[i * m + j] * scale;
                            if w != 0.0 {
                                kernels::axpy(w, qrow, &mut gk[j * d..(j + 1) * d]);
                            }
                        }
                    }
                }
            }
            Op::Softmax(s, mask) => {
                if wants(*s) {
                    let p = out.data();
                    let m = mask.cols();
                    let gs = slot(grads, nodes, *s);
                    for i in 0..mask.rows() {
                        let keys = mask.row_keys(i);
                        let inner: f64 = keys.iter().map(|&j| p[i * m + j] * g[i * m + j]).sum();
                        for &j in keys {
                            gs[i * m + j] += p[i * m + j] * (g[i * m + j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).numel();
                let n = inv_std.len();
                if wants(*gain) {
                    let gg = slot(grads, nodes, *gain);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for row in g.chunks(d) {
                        kernels::axpy(1.0, row, gb);
                    }
                }
                if wants(*x) {
                    let gain_v = val(*gain).data();
                    let gx = slot(grads, nodes, *x);
                    let mut dh = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dh[j] = g[i * d + j] * gain_v[j];
                        }
                        let h = &xhat[i * d..(i + 1) * d];
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = kernels::dot(&dh, h) / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for i in 0..rows {
                            kernels::axpy(
                                1.0,
                                &g[i * total + offset..i * total + offset + c],
                                &mut gp[i * c..(i + 1) * c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        kernels::axpy(1.0, &g[offset..offset + len], slot(grads, nodes, p));
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let gx = slot(grads, nodes, *x);
                    kernels::axpy(1.0, g, &mut gx[start * c..start * c + g.len()]);
                }
            }
            Op::GatherRows(x, idx) => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let gx = slot(grads, nodes, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut gx[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::SelectCols(x, cols) => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let w = cols.len();
                    let gx = slot(grads, nodes, *x);
                    for i in 0..out.rows() {
                        for (k, &j) in cols.iter().enumerate() {
                            gx[i * c + j] += g[i * w + k];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    kernels::axpy(1.0, g, slot(grads, nodes, *x));
                }
            }
            Op::Clamp(x, lo, hi) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let gx = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Canonical(x, swapped) => {
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (i, &s) in swapped.iter().enumerate() {
                        let (a, b) = if s { (1, 0) } else { (0, 1) };
                        gx[2 * i + a] += g[2 * i];
                        gx[2 * i + b] += g[2 * i + 1];
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    for v in slot(grads, nodes, *x).iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Bce(p, targets) => {
                if wants(*p) {
                    let pv = val(*p).data();
                    let k = pv.len() as f64;
                    let gp = slot(grads, nodes, *p);
                    for i in 0..pv.len() {
                        let pi = pv[i];
                        if pi > ops::PROB_CLAMP && pi < 1.0 - ops::PROB_CLAMP {
                            let t = targets[i];
                            gp[i] += -g[0] / k * (t / pi - (1.0 - t) / (1.0 - pi));
                        }
                    }
                }
            }
            Op::SmoothL1(x, targets) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let gx = slot(grads, nodes, *x);
                    for i in 0..xv.len() {
                        let d = xv[i] - targets[i];
                        gx[i] += g[0] * d.clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }
}
