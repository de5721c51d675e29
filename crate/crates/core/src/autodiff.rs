//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates vector-Jacobian
//! products. All reductions run sequentially in index order, so gradients are
//! bit-reproducible.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x[.., n] + bias[n]`
    AddRow(Var, Var),
    /// `x[.., n] * gain[n]`
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchStd { x: Var, xhat: Vec<T>, rstd: Vec<T> },
    CenterRows(Var),
    Im2Col { x: Var },
    AvgPool2(Var),
    Upsample2(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Tile(Var),
    Concat0(Vec<Var>),
    Square(Var),
    SumAll(Var),
    MaskedSqErr { pred: Var, target: Tensor<T>, weight: Tensor<T> },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Vec<T>, n_valid: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    let rows = if n == 0 { 0 } else { shape.iter().product::<usize>() / n };
    (rows, n)
}

/// `[B, r, c]` view of a rank-2 or rank-3 shape.
fn as_batched(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        3 => Ok((shape[0], shape[1], shape[2])),
        r => shape_err(format!("matmul operand of rank {}", r)),
    }
}

fn transpose_batched<T: Scalar>(data: &[T], b: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..b {
        let src = &data[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Batched `op(a) @ op(b)` on raw buffers; returns `(data, m, n)`.
#[allow(clippy::too_many_arguments)]
fn bmm_raw<T: Scalar>(
    a: &[T],
    (ab, ar, ac): (usize, usize, usize),
    ta: bool,
    b: &[T],
    (bb, br, bc): (usize, usize, usize),
    tb: bool,
) -> Result<(Vec<T>, usize, usize, usize)> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return shape_err(format!("matmul inner dims {} vs {}", k, k2));
    }
    let batch = ab.max(bb);
    if !(ab == bb || ab == 1 || bb == 1) {
        return shape_err(format!("matmul batch {} vs {}", ab, bb));
    }
    let at;
    let a_use: &[T] = if ta {
        at = transpose_batched(a, ab, ar, ac);
        &at
    } else {
        a
    };
    let bt;
    let b_use: &[T] = if tb {
        bt = transpose_batched(b, bb, br, bc);
        &bt
    } else {
        b
    };
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let ai = if ab == 1 { 0 } else { bi };
        let bj = if bb == 1 { 0 } else { bi };
        gemm_acc(
            &a_use[ai * m * k..(ai + 1) * m * k],
            &b_use[bj * k * n..(bj + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok((out, batch, m, n))
}

/// Sums a `[batch, r, c]` buffer down to `[r, c]`.
fn reduce_batch<T: Scalar>(data: Vec<T>, batch: usize, r: usize, c: usize) -> Vec<T> {
    if batch == 1 {
        return data;
    }
    let mut out = vec![T::zero(); r * c];
    for bi in 0..batch {
        for (o, &v) in out.iter_mut().zip(&data[bi * r * c..(bi + 1) * r * c]) {
            *o += v;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Values of every softmax output recorded on the tape, as `(rows, row_len)` views.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Softmax(_))).map(|n| &n.value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{}: {:?} vs {:?}", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    fn row_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let (_, n) = row_split(self.shape(x));
        if self.shape(v) != [n] {
            return shape_err(format!("row broadcast of {:?} onto {:?}", self.shape(v), self.shape(x)));
        }
        let vv = self.value(v).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (a, &b) in row.iter_mut().zip(&vv) {
                if mul {
                    *a *= b;
                } else {
                    *a += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(v);
        let op = if mul { Op::MulRow(x, v) } else { Op::AddRow(x, v) };
        Ok(self.push(t, op, rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast(x, bias, false)
    }

    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_broadcast(x, gain, true)
    }

    /// Batched matrix product on rank-2/3 operands; a rank-2 operand broadcasts over the batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = as_batched(self.shape(a))?;
        let sb = as_batched(self.shape(b))?;
        let (out, batch, m, n) = bmm_raw(self.value(a).data(), sa, ta, self.value(b).data(), sb, tb)?;
        let shape = if self.shape(a).len() == 2 && self.shape(b).len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let t = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let (_, n) = row_split(t.shape());
        if n > 0 {
            for row in t.data_mut().chunks_mut(n) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Standardizes each row over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let (rows, n) = row_split(src.shape());
        let mut out = src.clone();
        let mut rstd = Vec::with_capacity(rows);
        let nn = T::from_usize_lossy(n);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let xhat = out.data().to_vec();
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, xhat, rstd }, rg)
    }

    /// Standardizes each column of a `[rows, n]` matrix over its rows (biased variance).
    pub fn batch_standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 {
            return shape_err(format!("batch_standardize expects rank 2, got {:?}", src.shape()));
        }
        let (rows, n) = (src.shape()[0], src.shape()[1]);
        let nr = T::from_usize_lossy(rows);
        let mut mean = vec![T::zero(); n];
        for row in src.data().chunks(n) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nr);
        let mut var = vec![T::zero(); n];
        for row in src.data().chunks(n) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s / nr + eps).sqrt()).collect();
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((v, &m), &r) in row.iter_mut().zip(&mean).zip(&rstd) {
                *v = (*v - m) * r;
            }
        }
        let xhat = out.data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, Op::BatchStd { x, xhat, rstd }, rg))
    }

    /// Subtracts the column mean from each row of a `[rows, n]` matrix.
    pub fn center_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 {
            return shape_err(format!("center_rows expects rank 2, got {:?}", src.shape()));
        }
        let (rows, n) = (src.shape()[0], src.shape()[1]);
        let mut mean = vec![T::zero(); n];
        for row in src.data().chunks(n) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let nr = T::from_usize_lossy(rows);
        mean.iter_mut().for_each(|m| *m /= nr);
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::CenterRows(x), rg))
    }

    /// 3x3, stride 1, zero-padded patch extraction: `[n, h, w, c]` -> `[n*h*w, 9*c]`.
    pub fn im2col3(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 4 {
            return shape_err(format!("im2col expects NHWC, got {:?}", src.shape()));
        }
        let (n, h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2], src.shape()[3]);
        let mut out = vec![T::zero(); n * h * w * 9 * c];
        let sd = src.data();
        for img in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let row = ((img * h + i) * w + j) * 9 * c;
                    for di in 0..3 {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let s = ((img * h + ii as usize) * w + jj as usize) * c;
                            let d = row + (di * 3 + dj) * c;
                            out[d..d + c].copy_from_slice(&sd[s..s + c]);
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n * h * w, 9 * c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Im2Col { x }, rg))
    }

    /// 2x2 average pooling on NHWC.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 4 || src.shape()[1] % 2 != 0 || src.shape()[2] % 2 != 0 {
            return shape_err(format!("avg_pool2 expects NHWC with even h,w, got {:?}", src.shape()));
        }
        let (n, h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2], src.shape()[3]);
        let (h2, w2) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let mut out = Tensor::zeros(&[n, h2, w2, c]);
        let sd = src.data();
        let od = out.data_mut();
        for img in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = ((img * h2 + i) * w2 + j) * c;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((img * h + 2 * i + di) * w + 2 * j + dj) * c;
                        for ch in 0..c {
                            od[o + ch] += q * sd[s + ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2x upsampling on NHWC.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 4 {
            return shape_err(format!("upsample2 expects NHWC, got {:?}", src.shape()));
        }
        let (n, h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2], src.shape()[3]);
        let (h2, w2) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[n, h2, w2, c]);
        let sd = src.data();
        let od = out.data_mut();
        for img in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = ((img * h2 + i) * w2 + j) * c;
                    let s = ((img * h + i / 2) * w + j / 2) * c;
                    od[o..o + c].copy_from_slice(&sd[s..s + c]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Repeats `x` `reps` times along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            data.extend_from_slice(src.data());
        }
        let t = Tensor::from_vec(&shape, data).expect("tile shape");
        let rg = self.rg(x);
        self.push(t, Op::Tile(x), rg)
    }

    /// Concatenates along axis 0; trailing axes must agree.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of zero tensors");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err(format!("concat0 trailing {:?} vs {:?}", s, tail));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::from_vec(&shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(t, Op::Concat0(xs.to_vec()), rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(t, Op::Square(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize_lossy(self.value(x).len().max(1));
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// `Σ weight · (pred − target)²`, skipping every entry whose weight is exactly zero.
    pub fn masked_sq_err(&mut self, pred: Var, target: Tensor<T>, weight: Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != weight.shape() {
            return shape_err(format!(
                "masked_sq_err pred {:?} target {:?} weight {:?}",
                p.shape(),
                target.shape(),
                weight.shape()
            ));
        }
        let mut s = T::zero();
        for ((&pv, &tv), &wv) in p.data().iter().zip(target.data()).zip(weight.data()) {
            if wv != T::zero() {
                let d = pv - tv;
                s += wv * d * d;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(s), Op::MaskedSqErr { pred, target, weight }, rg))
    }

    /// Mean cross-entropy over rows of `[rows, k]` logits; rows labelled [`IGNORE_LABEL`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.shape()[0] != labels.len() {
            return shape_err(format!("cross_entropy logits {:?} for {} labels", l.shape(), labels.len()));
        }
        let k = l.shape()[1];
        let mut probs = vec![T::zero(); l.len()];
        let mut total = T::zero();
        let mut n_valid = 0usize;
        for (r, (row, &y)) in l.data().chunks(k).zip(labels).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * k + j] = e;
                s += e;
            }
            for j in 0..k {
                probs[r * k + j] /= s;
            }
            if y != IGNORE_LABEL {
                if y as usize >= k {
                    return shape_err(format!("label {} out of range for {} classes", y, k));
                }
                total += -(row[y as usize] - mx - s.ln());
                n_valid += 1;
            }
        }
        let loss = if n_valid == 0 { T::zero() } else { total / T::from_usize_lossy(n_valid) };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, n_valid },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            // keep the node's own gradient available to callers
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b);
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::from_vec(g.shape(), d)?);
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::from_vec(g.shape(), d)?);
                }
            }
            Op::Scale(x, s) => self.accum(grads, *x, g.map(|v| v * *s)),
            Op::AddRow(x, bias) => {
                self.accum(grads, *x, g.clone());
                if self.rg(*bias) {
                    let (_, n) = row_split(g.shape());
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, *bias, Tensor::from_vec(&[n], db)?);
                }
            }
            Op::MulRow(x, gain) => {
                let (_, n) = row_split(g.shape());
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(n) {
                        for (d, &s) in row.iter_mut().zip(gv) {
                            *d *= s;
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.rg(*gain) {
                    let xv = self.value(*x).data();
                    let mut dg = vec![T::zero(); n];
                    for (grow, xrow) in g.data().chunks(n).zip(xv.chunks(n)) {
                        for ((d, &gg), &xx) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gg * xx;
                        }
                    }
                    self.accum(grads, *gain, Tensor::from_vec(&[n], dg)?);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = self.value(a);
                let bv = self.value(b);
                let sa = as_batched(av.shape())?;
                let sb = as_batched(bv.shape())?;
                let sg = as_batched(g.shape())?;
                if self.rg(a) {
                    let (d, batch, r, c) = if ta {
                        bmm_raw(bv.data(), sb, tb, g.data(), sg, true)?
                    } else {
                        bmm_raw(g.data(), sg, false, bv.data(), sb, !tb)?
                    };
                    let d = if sa.0 == 1 && batch > 1 { reduce_batch(d, batch, r, c) } else { d };
                    self.accum(grads, a, Tensor::from_vec(av.shape(), d)?);
                }
                if self.rg(b) {
                    let (d, batch, r, c) = if tb {
                        bmm_raw(g.data(), sg, true, av.data(), sa, ta)?
                    } else {
                        bmm_raw(av.data(), sa, !ta, g.data(), sg, false)?
                    };
                    let d = if sb.0 == 1 && batch > 1 { reduce_batch(d, batch, r, c) } else { d };
                    self.accum(grads, b, Tensor::from_vec(bv.shape(), d)?);
                }
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gg, &yy)| if yy > T::zero() { gg } else { T::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Softmax(x) => {
                let (_, n) = row_split(g.shape());
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let (_, n) = row_split(g.shape());
                let nn = T::from_usize_lossy(n);
                let mut d = g.clone();
                for ((drow, xrow), &r) in d.data_mut().chunks_mut(n).zip(xhat.chunks(n)).zip(rstd) {
                    let mg = drow.iter().copied().sum::<T>() / nn;
                    let mgx = drow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() / nn;
                    for (dv, &xv) in drow.iter_mut().zip(xrow) {
                        *dv = r * (*dv - mg - xv * mgx);
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::BatchStd { x, xhat, rstd } => {
                let (rows, n) = (g.shape()[0], g.shape()[1]);
                let nr = T::from_usize_lossy(rows);
                let mut mg = vec![T::zero(); n];
                let mut mgx = vec![T::zero(); n];
                for (grow, xrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        mg[j] += grow[j];
                        mgx[j] += grow[j] * xrow[j];
                    }
                }
                mg.iter_mut().for_each(|v| *v /= nr);
                mgx.iter_mut().for_each(|v| *v /= nr);
                let mut d = g.clone();
                for (drow, xrow) in d.data_mut().chunks_mut(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        drow[j] = rstd[j] * (drow[j] - mg[j] - xrow[j] * mgx[j]);
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::CenterRows(x) => {
                let (rows, n) = (g.shape()[0], g.shape()[1]);
                let nr = T::from_usize_lossy(rows);
                let mut mg = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (m, &v) in mg.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mg.iter_mut().for_each(|v| *v /= nr);
                let mut d = g.clone();
                for row in d.data_mut().chunks_mut(n) {
                    for (v, &m) in row.iter_mut().zip(&mg) {
                        *v -= m;
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::Im2Col { x } => {
                let xs = self.shape(*x);
                let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = Tensor::zeros(xs);
                let gd = g.data();
                let dd = dx.data_mut();
                for img in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let row = ((img * h + i) * w + j) * 9 * c;
                            for di in 0..3 {
                                let ii = i as isize + di as isize - 1;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let jj = j as isize + dj as isize - 1;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let s = ((img * h + ii as usize) * w + jj as usize) * c;
                                    let o = row + (di * 3 + dj) * c;
                                    for ch in 0..c {
                                        dd[s + ch] += gd[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (h2, w2) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let mut dx = Tensor::zeros(xs);
                let gd = g.data();
                let dd = dx.data_mut();
                for img in 0..n {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            let o = ((img * h2 + i) * w2 + j) * c;
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let s = ((img * h + 2 * i + di) * w + 2 * j + dj) * c;
                                for ch in 0..c {
                                    dd[s + ch] += q * gd[o + ch];
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x);
                let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (h2, w2) = (h * 2, w * 2);
                let mut dx = Tensor::zeros(xs);
                let gd = g.data();
                let dd = dx.data_mut();
                for img in 0..n {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            let o = ((img * h2 + i) * w2 + j) * c;
                            let s = ((img * h + i / 2) * w + j / 2) * c;
                            for ch in 0..c {
                                dd[s + ch] += gd[o + ch];
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accum(grads, *x, g.permute(&inv)?);
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.accum(grads, *x, g.clone().reshape(&s)?);
            }
            Op::Tile(x) => {
                let s = self.shape(*x).to_vec();
                let n = self.value(*x).len();
                let mut d = vec![T::zero(); n];
                for chunk in g.data().chunks(n.max(1)) {
                    for (a, &b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::Concat0(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    let s = self.shape(x).to_vec();
                    self.accum(grads, x, Tensor::from_vec(&s, g.data()[off..off + n].to_vec())?);
                    off += n;
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::lit(2.0);
                let d = g.data().iter().zip(xv.data()).map(|(&gg, &v)| two * gg * v).collect();
                self.accum(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::SumAll(x) => {
                let s = self.shape(*x).to_vec();
                self.accum(grads, *x, Tensor::full(&s, g.item()));
            }
            Op::MaskedSqErr { pred, target, weight } => {
                let pv = self.value(*pred);
                let two = T::lit(2.0) * g.item();
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&p, &t), &w)| if w == T::zero() { T::zero() } else { two * w * (p - t) })
                    .collect();
                self.accum(grads, *pred, Tensor::from_vec(pv.shape(), d)?);
            }
            Op::CrossEntropy { logits, labels, probs, n_valid } => {
                let s = self.shape(*logits).to_vec();
                let k = s[1];
                let mut d = vec![T::zero(); probs.len()];
                if *n_valid > 0 {
                    let scale = g.item() / T::from_usize_lossy(*n_valid);
                    for (r, &y) in labels.iter().enumerate() {
                        if y == IGNORE_LABEL {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == y as usize { T::one() } else { T::zero() };
                            d[r * k + j] = scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
                self.accum(grads, *logits, Tensor::from_vec(&s, d)?);
            }
        }
        Ok(())
    }
}
