//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every differentiable operation in execution order.
//! Because an operation can only reference nodes created before it, walking
//! the node list backwards is an anti-topological traversal that visits each
//! operation exactly once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{strides, Scalar, Tensor};
use crate::error::{Error, Result};

/// Target value that contributes zero loss and zero gradient.
pub const IGNORE_INDEX: u32 = u32::MAX;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    trans_b: bool,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Sum(Var),
    MatMul(Var, Var, MatMulPlan),
    Silu(Var),
    Gelu(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        w: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Rotary {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates values only; no node requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) || value.all_finite(),
            "non-finite output from finite inputs"
        );
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let inner = vb.len().max(1);
        let bd = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let out = Tensor::new(sa, data)?;
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let va = self.value(a);
        if va.len() != mask.len() {
            return Err(Error::shape("mul_const", va.shape(), &[mask.len()]));
        }
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::MulConst(a, mask), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(va.shape(), data).expect("same extent");
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// `Σ weights[i] * terms[i]`, each term a scalar.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[T]) -> Result<Var> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                &[terms.len()],
                &[weights.len()],
            ));
        }
        let mut acc = self.scale(terms[0], weights[0]);
        for (&t, &w) in terms.iter().zip(weights).skip(1) {
            let s = self.scale(t, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(va.shape(), data).expect("same extent");
        self.push(out, Op::Silu(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(va.shape(), data).expect("same extent");
        self.push(out, Op::Gelu(a), &[a])
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(va.data(), shape, perm);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swap the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Gather rows of `src` (viewed as `[rows, last_dim]`) by index. The
    /// output has shape `prefix ++ [last_dim]`.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        let d = vs.last_dim();
        let rows = vs.len() / d.max(1);
        let expected: usize = prefix.iter().product();
        if expected != ids.len() {
            return Err(Error::shape("gather_rows", prefix, &[ids.len()]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "row",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&vs.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Gather(src, ids.to_vec()), &[src]))
    }

    /// Embedding lookup: rows of `table` `[vocab, dim]` for integer token ids.
    pub fn embedding(&mut self, table: Var, ids: &[u32], prefix: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather_rows(table, &rows, prefix)
    }

    // ---- matmul ----

    /// Batched matrix product `[.., m, k] @ [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` with `b` of shape `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, sa, sb));
        }
        let (batch_shape, a_offsets, b_offsets) =
            broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2], m * k, k * n)
                .ok_or_else(|| Error::shape(op, sa, sb))?;
        let batch = a_offsets.len();
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        // A 2-D right operand shared by every batch entry folds into one gemm.
        let fold = sb.len() == 2;
        unsafe {
            if fold {
                T::gemm(
                    batch * m,
                    k,
                    n,
                    T::one(),
                    va.data().as_ptr(),
                    k as isize,
                    1,
                    vb.data().as_ptr(),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            } else {
                for i in 0..batch {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        va.data().as_ptr().add(a_offsets[i]),
                        k as isize,
                        1,
                        vb.data().as_ptr().add(b_offsets[i]),
                        rsb,
                        csb,
                        T::zero(),
                        out.as_mut_ptr().add(i * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let plan = MatMulPlan {
            batch,
            m,
            k,
            n,
            a_offsets,
            b_offsets,
            trans_b,
        };
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::MatMul(a, b, plan), &[a, b]))
    }

    // ---- normalization / attention ----

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Softmax over the trailing axis of `[.., T, S]` where row `i` may only
    /// attend to columns `j <= i + offset`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("causal_softmax", s, &[]));
        }
        Ok(self.softmax_impl(x, Some(offset)))
    }

    fn softmax_impl(&mut self, x: Var, causal: Option<usize>) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let s = vx.last_dim();
        let t = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            1
        };
        let mut out = vec![T::zero(); vx.len()];
        for (r, (row, orow)) in vx
            .data()
            .chunks(s.max(1))
            .zip(out.chunks_mut(s.max(1)))
            .enumerate()
        {
            let limit = match causal {
                Some(off) => ((r % t) + off + 1).min(s),
                None => s,
            };
            softmax_into(&row[..limit], &mut orow[..limit]);
        }
        let out = Tensor::new(&shape, out).expect("same extent");
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Bias-free layer norm over the trailing axis with elementwise `weight`.
    pub fn layer_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let d = vx.last_dim();
        if vw.shape() != [d] || d == 0 {
            return Err(Error::shape("layer_norm", vx.shape(), vw.shape()));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let rows = vx.len() / d;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vw.data()[j];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, w, xhat, rstd }, &[x, w]))
    }

    /// Pairwise rotation of `x` `[.., T, H, hd]`: for every position `t` and
    /// pair `i`, `(x0, x1) -> (c x0 - s x1, s x0 + c x1)` with
    /// `c = cos[t * hd/2 + i]`, `s = sin[t * hd/2 + i]`. The tables may carry
    /// a magnitude factor.
    pub fn rotary(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if shape.len() < 3 || shape[shape.len() - 1] % 2 != 0 {
            return Err(Error::shape("rotary", shape, &[cos.len()]));
        }
        let (t, h, hd) = (
            shape[shape.len() - 3],
            shape[shape.len() - 2],
            shape[shape.len() - 1],
        );
        let half = hd / 2;
        if cos.len() != t * half || sin.len() != t * half {
            return Err(Error::shape("rotary", shape, &[cos.len()]));
        }
        let mut out = vec![T::zero(); vx.len()];
        let data = vx.data();
        for (blk, chunk) in data.chunks(t * h * hd).enumerate() {
            let base = blk * t * h * hd;
            for ti in 0..t {
                for hi in 0..h {
                    let o = ti * h * hd + hi * hd;
                    for i in 0..half {
                        let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                        let (x0, x1) = (chunk[o + 2 * i], chunk[o + 2 * i + 1]);
                        out[base + o + 2 * i] = c * x0 - s * x1;
                        out[base + o + 2 * i + 1] = s * x0 + c * x1;
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Rotary { x, cos, sin }, &[x]))
    }

    /// `Σ_r weights[r] * CE(logits[r], targets[r])` over rows of `[M, V]`
    /// logits. Rows whose target is [`IGNORE_INDEX`] contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[T]) -> Result<Var> {
        let vl = self.value(logits);
        let v = vl.last_dim();
        let rows = vl.len() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                vl.shape(),
                &[targets.len(), weights.len()],
            ));
        }
        let mut probs = vec![T::zero(); vl.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let tgt = targets[r];
            if tgt == IGNORE_INDEX {
                continue;
            }
            if tgt as usize >= v {
                return Err(Error::Index {
                    what: "target",
                    index: tgt as usize,
                    bound: v,
                });
            }
            let row = &vl.data()[r * v..(r + 1) * v];
            let p = &mut probs[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            for j in 0..v {
                p[j] = (row[j] - lse).exp();
            }
            total = total + weights[r] * (lse - row[tgt as usize]);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    // ---- reverse pass ----

    /// Accumulate `d loss / d leaf` into every leaf that requires a gradient.
    /// Intermediate gradients are cleared first; leaf gradients accumulate
    /// across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0], &[T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(&mut self.nodes[v.0], g);
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut self.nodes[a.0], g);
                }
                if self.wants(*b) {
                    let inner = self.nodes[b.0].value.len().max(1);
                    let mut gb = vec![T::zero(); inner];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % inner] = gb[i % inner] + gi;
                    }
                    accumulate(&mut self.nodes[b.0], &gb);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let gb: Vec<T> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(&mut self.nodes[a.0], &gb);
                }
                if self.wants(*b) {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(&mut self.nodes[b.0], &ga);
                }
            }
            Op::MulConst(a, mask) => {
                let ga: Vec<T> = g.iter().zip(mask).map(|(&x, &m)| x * m).collect();
                accumulate(&mut self.nodes[a.0], &ga);
            }
            Op::Scale(a, s) => {
                let ga: Vec<T> = g.iter().map(|&x| x * *s).collect();
                accumulate(&mut self.nodes[a.0], &ga);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(&mut self.nodes[a.0], &vec![g[0]; n]);
            }
            Op::Silu(a) => {
                let ga: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let s = sigmoid(x);
                        gi * (s + x * s * (T::one() - s))
                    })
                    .collect();
                accumulate(&mut self.nodes[a.0], &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| gi * gelu_grad(x))
                    .collect();
                accumulate(&mut self.nodes[a.0], &ga);
            }
            Op::Reshape(a) => accumulate(&mut self.nodes[a.0], g),
            Op::Permute(a, perm) => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let ga = permute_data(g, &out_shape, &inv);
                accumulate(&mut self.nodes[a.0], &ga);
            }
            Op::Gather(src, ids) => {
                let node = &mut self.nodes[src.0];
                let d = node.value.last_dim();
                let n = node.value.len();
                let grad = node.grad.get_or_insert_with(|| vec![T::zero(); n]);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut grad[id * d..(id + 1) * d];
                    for (x, &y) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x = *x + y;
                    }
                }
            }
            Op::MatMul(a, b, plan) => self.backprop_matmul(*a, *b, plan, g),
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let s = self.nodes[idx].value.last_dim().max(1);
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y.chunks(s).zip(g.chunks(s)).zip(gx.chunks_mut(s)) {
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..s {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut self.nodes[x.0], &gx);
            }
            Op::LayerNorm { x, w, xhat, rstd } => {
                let d = self.nodes[w.0].value.len();
                let rows = rstd.len();
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gw[j] = gw[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(&mut self.nodes[w.0], &gw);
                }
                if self.wants(*x) {
                    let wv = self.nodes[w.0].value.data();
                    let dn = T::from_usize(d).unwrap();
                    let mut gx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut sum_gh = T::zero();
                        let mut sum_ghx = T::zero();
                        for j in 0..d {
                            let gh = g[r * d + j] * wv[j];
                            sum_gh = sum_gh + gh;
                            sum_ghx = sum_ghx + gh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let gh = g[r * d + j] * wv[j];
                            gx[r * d + j] =
                                rstd[r] * (gh - sum_gh / dn - xhat[r * d + j] * sum_ghx / dn);
                        }
                    }
                    accumulate(&mut self.nodes[x.0], &gx);
                }
            }
            Op::Rotary { x, cos, sin } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (t, h, hd) = (
                    shape[shape.len() - 3],
                    shape[shape.len() - 2],
                    shape[shape.len() - 1],
                );
                let half = hd / 2;
                let mut gx = vec![T::zero(); g.len()];
                for (blk, chunk) in g.chunks(t * h * hd).enumerate() {
                    let base = blk * t * h * hd;
                    for ti in 0..t {
                        for hi in 0..h {
                            let o = ti * h * hd + hi * hd;
                            for i in 0..half {
                                let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                                let (g0, g1) = (chunk[o + 2 * i], chunk[o + 2 * i + 1]);
                                gx[base + o + 2 * i] = c * g0 + s * g1;
                                gx[base + o + 2 * i + 1] = c * g1 - s * g0;
                            }
                        }
                    }
                }
                accumulate(&mut self.nodes[x.0], &gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.nodes[logits.0].value.last_dim();
                let mut gl = vec![T::zero(); probs.len()];
                for (r, &tgt) in targets.iter().enumerate() {
                    if tgt == IGNORE_INDEX {
                        continue;
                    }
                    let scale = g[0] * weights[r];
                    for j in 0..v {
                        gl[r * v + j] = scale * probs[r * v + j];
                    }
                    gl[r * v + tgt as usize] = gl[r * v + tgt as usize] - scale;
                }
                accumulate(&mut self.nodes[logits.0], &gl);
            }
        }
    }

    fn backprop_matmul(&mut self, a: Var, b: Var, plan: &MatMulPlan, g: &[T]) {
        let MatMulPlan {
            batch,
            m,
            k,
            n,
            ref a_offsets,
            ref b_offsets,
            trans_b,
        } = *plan;
        let fold = self.nodes[b.0].value.ndim() == 2;
        if self.wants(a) {
            let na = self.nodes[a.0].value.len();
            let mut ga = self.nodes[a.0]
                .grad
                .take()
                .unwrap_or_else(|| vec![T::zero(); na]);
            let bv = self.nodes[b.0].value.data();
            // ga = g @ B_effᵀ, B_effᵀ is [n, k]
            let (rs, cs) = if trans_b {
                (k as isize, 1)
            } else {
                (1, n as isize)
            };
            unsafe {
                if fold {
                    T::gemm(
                        batch * m,
                        n,
                        k,
                        T::one(),
                        g.as_ptr(),
                        n as isize,
                        1,
                        bv.as_ptr(),
                        rs,
                        cs,
                        T::one(),
                        ga.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                } else {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            bv.as_ptr().add(b_offsets[i]),
                            rs,
                            cs,
                            T::one(),
                            ga.as_mut_ptr().add(a_offsets[i]),
                            k as isize,
                            1,
                        );
                    }
                }
            }
            self.nodes[a.0].grad = Some(ga);
        }
        if self.wants(b) {
            let nb = self.nodes[b.0].value.len();
            let mut gb = self.nodes[b.0]
                .grad
                .take()
                .unwrap_or_else(|| vec![T::zero(); nb]);
            let av = self.nodes[a.0].value.data();
            // gB_eff = aᵀ @ g, [k, n]; stored transposed when trans_b.
            let (rsc, csc) = if trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            unsafe {
                if fold {
                    T::gemm(
                        k,
                        batch * m,
                        n,
                        T::one(),
                        av.as_ptr(),
                        1,
                        k as isize,
                        g.as_ptr(),
                        n as isize,
                        1,
                        T::one(),
                        gb.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                } else {
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.as_ptr().add(a_offsets[i]),
                            1,
                            k as isize,
                            g.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            T::one(),
                            gb.as_mut_ptr().add(b_offsets[i]),
                            rsc,
                            csc,
                        );
                    }
                }
            }
            self.nodes[b.0].grad = Some(gb);
        }
    }
}

fn accumulate<T: Scalar>(node: &mut Node<T>, g: &[T]) {
    match &mut node.grad {
        Some(acc) => {
            for (x, &y) in acc.iter_mut().zip(g) {
                *x = *x + y;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(core::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(core::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    half * (T::one() + (x * inv_sqrt2).erf()) + x * inv_sqrt_2pi * (-(x * x) * half).exp()
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let s = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + s.ln()
}

pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return data.to_vec();
    }
    // Iterate output in row-major order with an odometer over the source offset.
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let outer = if inner == 0 { 0 } else { n / inner };
    for _ in 0..outer {
        let mut o = off;
        for _ in 0..inner {
            out.push(data[o]);
            o += inner_stride;
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Broadcast two batch shapes, returning the output batch shape and the
/// element offset of each output batch entry within `a` and `b`.
fn broadcast_batches(
    sa: &[usize],
    sb: &[usize],
    a_mat: usize,
    b_mat: usize,
) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let nd = sa.len().max(sb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1usize; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(sa), pad(sb));
    let mut out = Vec::with_capacity(nd);
    for i in 0..nd {
        let (x, y) = (pa[i], pb[i]);
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let sta = strides(&pa);
    let stb = strides(&pb);
    let total: usize = out.iter().product();
    let mut ao = Vec::with_capacity(total);
    let mut bo = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let mut oa = 0;
        let mut ob = 0;
        for ax in 0..nd {
            if pa[ax] != 1 {
                oa += idx[ax] * sta[ax];
            }
            if pb[ax] != 1 {
                ob += idx[ax] * stb[ax];
            }
        }
        ao.push(oa * a_mat);
        bo.push(ob * b_mat);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some((out, ao, bo))
}
