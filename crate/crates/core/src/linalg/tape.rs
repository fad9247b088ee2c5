//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward pass is a single reverse sweep.
//! Frozen weights are borrowed for the tape lifetime `'w` and can never
//! receive a gradient buffer.

use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'w> {
    Input,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    MatMulFrozen {
        a: Var,
        w: &'w Tensor,
        transposed: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<&'w Tensor>,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MeanPool {
        x: Var,
        group: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node<'w> {
    value: Tensor,
    op: Op<'w>,
    needs_grad: bool,
}

/// Gradients of the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.get_mut(var.0).and_then(Option::take)
    }

    /// Number of leaves carrying a gradient buffer.
    pub fn populated(&self) -> usize {
        self.leaves.iter().filter(|g| g.is_some()).count()
    }
}

#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op<'w>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `tensor`; it is a gradient leaf iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Input, needs)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.input(tensor.with_grad())
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.input(tensor)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op<'w>) -> Var {
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op<'w>) -> Var {
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, needs)
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[var.0].value;
        if t.shape().len() > 2 {
            return Err(Error::dim(op, t.shape(), &[]));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a·b`, or `a·bᵀ` when `b_transposed`.
    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (k2, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            b_transposed,
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.binary(
            a,
            b,
            value,
            Op::MatMul {
                a,
                b,
                b_transposed,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_frozen_impl(&mut self, a: Var, w: &'w Tensor, transposed: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_frozen")?;
        let (k2, n) = if transposed {
            (w.cols(), w.rows())
        } else {
            (w.rows(), w.cols())
        };
        if k != k2 || w.shape().len() != 2 {
            return Err(Error::dim(
                "matmul_frozen",
                self.nodes[a.0].value.shape(),
                w.shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            w.data(),
            transposed,
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.unary(a, value, Op::MatMulFrozen { a, w, transposed }))
    }

    /// `a·w` with a frozen weight.
    pub fn matmul_frozen(&mut self, a: Var, w: &'w Tensor) -> Result<Var> {
        self.matmul_frozen_impl(a, w, false)
    }

    /// `a·wᵀ` with a frozen weight.
    pub fn matmul_frozen_t(&mut self, a: Var, w: &'w Tensor) -> Result<Var> {
        self.matmul_frozen_impl(a, w, true)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Tensor::new(tb.shape(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            Err(Error::dim(name, ta.shape(), tb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise(a, b, "div", |x, y| x / y)?;
        Ok(self.binary(a, b, v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.nodes[x.0].value.scale(factor);
        self.unary(x, v, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.nodes[x.0].value.map(|a| a + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::abs);
        self.unary(x, v, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(gelu);
        self.unary(x, v, Op::Gelu(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        self.unary(x, v, Op::Softmax(x))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|a| *a -= lse);
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        self.unary(x, v, Op::LogSoftmax(x))
    }

    /// Row-wise layer normalization with population variance, followed by a
    /// frozen affine map when `affine` is given.
    pub fn layer_norm(
        &mut self,
        x: Var,
        eps: f64,
        affine: Option<(&'w Tensor, &'w Tensor)>,
    ) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let cols = t.cols();
        if let Some((g, b)) = affine {
            if g.numel() != cols || b.numel() != cols {
                return Err(Error::dim("layer_norm", t.shape(), g.shape()));
            }
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in t.data().chunks(cols).zip(xhat.chunks_mut(cols)).enumerate() {
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = if var.is_finite() {
                1.0 / (var + eps).sqrt()
            } else {
                // Squares overflowed on finite input; rescale by the largest
                // deviation so huge rows still normalize instead of zeroing.
                let s = src.iter().map(|a| (a - mean).abs()).fold(0.0, f64::max);
                let q = src.iter().map(|a| ((a - mean) / s).powi(2)).sum::<f64>() / cols as f64;
                1.0 / (s * (q + eps / (s * s)).sqrt())
            };
            inv_std[r] = is;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let out = match affine {
            Some((g, b)) => xhat
                .chunks(cols)
                .flat_map(|row| {
                    row.iter()
                        .zip(g.data())
                        .zip(b.data())
                        .map(|((h, g), b)| h * g + b)
                })
                .collect(),
            None => xhat.clone(),
        };
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.unary(
            x,
            v,
            Op::LayerNorm {
                x,
                gamma: affine.map(|(g, _)| g),
                inv_std,
                xhat,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(x, Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[x.0].value.reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// Averages consecutive groups of `group` rows: `(B·group)×D → B×D`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (rows, cols) = (t.rows(), t.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::dim("mean_pool", t.shape(), &[group]));
        }
        let b = rows / group;
        let mut out = vec![0.0; b * cols];
        for (r, row) in t.data().chunks(cols).enumerate() {
            let dst = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (d, s) in dst.iter_mut().zip(row) {
                *d += s / group as f64;
            }
        }
        let v = Tensor::matrix(b, cols, out)?;
        Ok(self.unary(x, v, Op::MeanPool { x, group }))
    }

    /// Multi-head causal self-attention over blocks of `seq_len` rows.
    ///
    /// `q`, `k`, `v` are `(B·seq_len)×D`; each block of `seq_len` rows is an
    /// independent sequence. Position `i` attends to positions `0..=i`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::dim("causal_attention", tq.shape(), tk.shape()));
        }
        let (rows, dim) = (tq.rows(), tq.cols());
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::dim("causal_attention", tq.shape(), &[seq_len, heads]));
        }
        let batch = rows / seq_len;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * dim];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * dim + h * hd..][..hd];
                    let prow = &mut probs[p_base + i * seq_len..p_base + (i + 1) * seq_len];
                    for (j, p) in prow.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(b * seq_len + j) * dim + h * hd..][..hd];
                        *p = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = &mut out[(b * seq_len + i) * dim + h * hd..][..hd];
                    for (j, &p) in prow.iter().enumerate().take(i + 1) {
                        let vj = &vd[(b * seq_len + j) * dim + h * hd..][..hd];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(tq.shape(), out)?;
        let needs = [q, k, v].iter().any(|x| self.nodes[x.0].needs_grad);
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if let Op::Input = node.op {
                leaves[idx] = Some(Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(Gradients { leaves })
    }

    fn propagate(&self, node: &Node<'w>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Input => {}
            Op::MatMul {
                a,
                b,
                b_transposed,
            } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = node.value.cols();
                if wants(*a) {
                    // ga = g·bᵀ (or g·b when b was transposed)
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), !b_transposed, buf, 1.0);
                }
                if wants(*b) {
                    if *b_transposed {
                        // out = a·bᵀ, b is n×k: gb = gᵀ·a
                        let buf = slot(grads, *b, n * k);
                        gemm(n, m, k, g, true, ta.data(), false, buf, 1.0);
                    } else {
                        let buf = slot(grads, *b, k * n);
                        gemm(k, m, n, ta.data(), true, g, false, buf, 1.0);
                    }
                }
            }
            Op::MatMulFrozen { a, w, transposed } => {
                if wants(*a) {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = node.value.cols();
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, w.data(), !transposed, buf, 1.0);
                }
            }
            Op::Add(a, b) => {
                accumulate_broadcast(grads, *a, val(*a), wants(*a), g, |_| 1.0);
                accumulate_broadcast(grads, *b, val(*b), wants(*b), g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(grads, *a, val(*a), wants(*a), g, |_| 1.0);
                accumulate_broadcast(grads, *b, val(*b), wants(*b), g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                accumulate_broadcast(grads, *a, ta, wants(*a), g, |i| pick(tb, i));
                accumulate_broadcast(grads, *b, tb, wants(*b), g, |i| pick(ta, i));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                accumulate_broadcast(grads, *a, ta, wants(*a), g, |i| 1.0 / pick(tb, i));
                accumulate_broadcast(grads, *b, tb, wants(*b), g, |i| {
                    let d = pick(tb, i);
                    -pick(ta, i) / (d * d)
                });
            }
            Op::Scale(x, c) => {
                let buf = slot(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(b, gi)| *b += c * gi);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let buf = slot(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi);
            }
            Op::Abs(x) => {
                let xs = val(*x).data();
                let buf = slot(grads, *x, g.len());
                for ((b, gi), xi) in buf.iter_mut().zip(g).zip(xs) {
                    *b += gi * sign(*xi);
                }
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                let buf = slot(grads, *x, g.len());
                for ((b, gi), xi) in buf.iter_mut().zip(g).zip(xs) {
                    if *xi > 0.0 {
                        *b += gi;
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = val(*x).data();
                let buf = slot(grads, *x, g.len());
                for ((b, gi), xi) in buf.iter_mut().zip(g).zip(xs) {
                    *b += gi * gelu_grad(*xi);
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                let buf = slot(grads, *x, g.len());
                for ((b, gr), yr) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, c)| a * c).sum();
                    for ((bi, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                        *bi += yi * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                let buf = slot(grads, *x, g.len());
                for ((b, gr), yr) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((bi, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                        *bi += gi - yi.exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                inv_std,
                xhat,
            } => {
                let cols = node.value.cols();
                let n = cols as f64;
                let buf = slot(grads, *x, g.len());
                let mut gh = vec![0.0; cols];
                for (r, ((b, gr), hr)) in buf
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(xhat.chunks(cols))
                    .enumerate()
                {
                    match gamma {
                        Some(gm) => gh
                            .iter_mut()
                            .zip(gr)
                            .zip(gm.data())
                            .for_each(|((o, a), c)| *o = a * c),
                        None => gh.copy_from_slice(gr),
                    }
                    let mean_g = gh.iter().sum::<f64>() / n;
                    let mean_gh = gh.iter().zip(hr).map(|(a, c)| a * c).sum::<f64>() / n;
                    for ((bi, gi), hi) in b.iter_mut().zip(&gh).zip(hr) {
                        *bi += inv_std[r] * (gi - mean_g - hi * mean_gh);
                    }
                }
            }
            Op::Sum(x) => {
                let buf = slot(grads, *x, val(*x).numel());
                buf.iter_mut().for_each(|b| *b += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let buf = slot(grads, *x, n);
                let gi = g[0] / n as f64;
                buf.iter_mut().for_each(|b| *b += gi);
            }
            Op::MeanPool { x, group } => {
                let cols = node.value.cols();
                let n = val(*x).numel();
                let buf = slot(grads, *x, n);
                for (r, row) in buf.chunks_mut(cols).enumerate() {
                    let src = &g[(r / group) * cols..(r / group + 1) * cols];
                    for (b, s) in row.iter_mut().zip(src) {
                        *b += s / *group as f64;
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => attention_backward(
                grads,
                [*q, *k, *v],
                [wants(*q), wants(*k), wants(*v)],
                [val(*q).data(), val(*k).data(), val(*v).data()],
                g,
                probs,
                *seq_len,
                *heads,
                node.value.cols(),
            ),
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn pick(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds `g[i]·local(i)` into `target`'s buffer, summing when `target` was a
/// broadcast scalar.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    target: Var,
    value: &Tensor,
    wanted: bool,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if !wanted {
        return;
    }
    if value.is_scalar() && g.len() != 1 {
        let total: f64 = g.iter().enumerate().map(|(i, gi)| gi * local(i)).sum();
        slot(grads, target, 1)[0] += total;
    } else {
        let buf = slot(grads, target, g.len());
        for (i, (b, gi)) in buf.iter_mut().zip(g).enumerate() {
            *b += gi * local(i);
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for a in row.iter_mut() {
        *a = (*a - max).exp();
        total += *a;
    }
    row.iter_mut().for_each(|a| *a /= total);
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    grads: &mut [Option<Vec<f64>>],
    vars: [Var; 3],
    wanted: [bool; 3],
    data: [&[f64]; 3],
    g: &[f64],
    probs: &[f64],
    seq_len: usize,
    heads: usize,
    dim: usize,
) {
    let [qd, kd, vd] = data;
    let rows = qd.len() / dim;
    let batch = rows / seq_len;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; seq_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let gi = &g[(b * seq_len + i) * dim + h * hd..][..hd];
                let prow = &probs[p_base + i * seq_len..][..=i];
                for j in 0..=i {
                    let off = (b * seq_len + j) * dim + h * hd;
                    dp[j] = gi.iter().zip(&vd[off..off + hd]).map(|(a, c)| a * c).sum();
                    for (d, x) in dv[off..off + hd].iter_mut().zip(gi) {
                        *d += prow[j] * x;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                let qoff = (b * seq_len + i) * dim + h * hd;
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let koff = (b * seq_len + j) * dim + h * hd;
                    for c in 0..hd {
                        dq[qoff + c] += ds * kd[koff + c];
                        dk[koff + c] += ds * qd[qoff + c];
                    }
                }
            }
        }
    }
    for ((var, want), contrib) in vars.into_iter().zip(wanted).zip([dq, dk, dv]) {
        if want {
            let buf = slot(grads, var, contrib.len());
            buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c);
        }
    }
}
