//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter the tape by
//! reference (no copy) through [`Tape::param`]; [`Tape::backward`] replays the tape in
//! reverse and returns [`Gradients`], which can be looked up per recorded value or per
//! bound parameter tensor. A tape is single-threaded and lives for one forward/backward
//! step.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axis_split, matmul_dims, matmul_into, transpose_data, Tensor};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    params: HashMap<usize, Var>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Tape whose parameters require gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// Tape for inference: nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf that requires a gradient (when the tape tracks gradients).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter tensor by reference. Binding the same tensor twice returns the
    /// same handle.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        let key = tensor as *const Tensor<T> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::Shape(format!(
                "bias of {} values for rows of width {c}",
                vb.len()
            )));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % c])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Element-wise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if factors.len() != vx.len() {
            return Err(Error::Shape(format!(
                "{} factors for {} values",
                factors.len(),
                vx.len()
            )));
        }
        let data = vx.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, factors), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize_lossy(v.len());
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Row softmax over the last axis where `keep[j] == false` columns get exactly zero
    /// weight. A row with no kept column yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if keep.len() != c {
            return Err(Error::Shape(format!(
                "mask of {} entries for rows of width {c}",
                keep.len()
            )));
        }
        let mut out = vec![T::zero(); vx.len()];
        for (row_in, row_out) in vx.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = row_in
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for ((o, &v), &k) in row_out.iter_mut().zip(row_in).zip(keep) {
                if k {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::MaskedSoftmax(x), &[x]))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.cols();
        if vg.len() != c || vb.len() != c {
            return Err(Error::Shape(format!(
                "layer norm params of {}/{} for width {c}",
                vg.len(),
                vb.len()
            )));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::from_usize_lossy(c);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * inv;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Selects rows of a matrix; also serves as embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (r, c) = (vt.rows(), vt.cols());
        if idx.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat of differing row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if start >= end || end > c {
            return Err(Error::Shape(format!("column slice {start}..{end} of width {c}")));
        }
        let mut data = Vec::with_capacity(vx.rows() * (end - start));
        for i in 0..vx.rows() {
            data.extend_from_slice(&vx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![vx.rows(), end - start], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, c) = (vl.rows(), vl.cols());
        if vl.shape().len() != 2 || targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for logits {:?}",
                targets.len(),
                vl.shape()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {t} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (row, &t) in vl.data().chunks(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::from_usize_lossy(n);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = matmul_dims(va.shape(), vb.shape()).expect("recorded dims");
                self.accumulate(grads, *a, |ga| {
                    let bt = transpose_data(vb.data(), k, n);
                    matmul_into(g, &bt, ga, m, n, k);
                });
                self.accumulate(grads, *b, |gb| {
                    let at = transpose_data(va.data(), m, k);
                    matmul_into(&at, g, gb, k, m, n);
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                self.accumulate(grads, *x, |gx| {
                    for (dst, src) in gx.iter_mut().zip(transpose_data(g, r, c)) {
                        *dst += src;
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |gv| add_assign(gv, g));
                }
            }
            Op::AddBias(x, b) => {
                let c = out.cols();
                self.accumulate(grads, *x, |gx| add_assign(gx, g));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(c) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(vb.data()) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(va.data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::MulConst(x, f) => {
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gi), &fi) in gx.iter_mut().zip(g).zip(f) {
                        *d += gi * fi;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi * *s;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = T::from_usize_lossy(self.value(*x).len());
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).expect("recorded axis");
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: T = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let c = out.cols();
                self.accumulate(grads, *x, |gx| {
                    for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let vg = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &gi), &hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(c) {
                        add_assign(gb, gr);
                    }
                });
                let n = T::from_usize_lossy(c);
                self.accumulate(grads, *x, |gx| {
                    for (r, ((gr, hr), dr)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .enumerate()
                    {
                        let dh: Vec<T> = gr.iter().zip(vg).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for ((d, &dhi), &hi) in dr.iter_mut().zip(&dh).zip(hr) {
                            *d += k * (n * dhi - sum_dh - hi * sum_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(vx.data()) {
                        *d += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(vx.data()) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let c = out.cols();
                self.accumulate(grads, *table, |gt| {
                    for (k, &row) in idx.iter().enumerate() {
                        add_assign(&mut gt[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (i, dr) in gp.chunks_mut(w).enumerate() {
                            add_assign(dr, &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (i, gr) in g.chunks(w).enumerate() {
                        add_assign(&mut gx[i * c + start..i * c + start + w], gr);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / T::from_usize_lossy(targets.len());
                self.accumulate(grads, *logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[i * c + j] += (probs[i * c + j] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a recorded value; `None` when it does not require one or is unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a tensor bound with [`Tape::param`].
    pub fn of_param(&self, tensor: &Tensor<T>) -> Option<&Tensor<T>> {
        let key = tensor as *const Tensor<T> as usize;
        self.params.get(&key).and_then(|&v| self.get(v))
    }
}
