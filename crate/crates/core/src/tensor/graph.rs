use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    LowRank { x: Var, w: Var, lora: Vec<LoraTerm>, xa: Vec<T> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Select(Var, usize),
    Silu(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SoftCrossEntropy { logits: Var, target: Tensor<T>, probs: Vec<T> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
}

/// One `coef · B·A` update inside [`Graph::linear_lora`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraTerm {
    pub a: Var,
    pub b: Var,
    pub coef: Var,
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    n_seq: usize,
    seq_len: usize,
    n_heads: usize,
    d_head: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations. Every op records its inputs when
/// any of them requires a gradient; [`Graph::backward`] replays the tape in
/// reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every `requires_grad` leaf after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Copy of `[n, rank]` data with the column block of term `i` times `coefs[i]`.
fn scale_cols<T: Scalar>(data: &[T], rank: usize, coefs: &[T], offs: &[usize]) -> Vec<T> {
    let mut out = data.to_vec();
    if rank == 0 {
        return out;
    }
    for row in out.chunks_exact_mut(rank) {
        for (i, &c) in coefs.iter().enumerate() {
            row[offs[i]..offs[i + 1]].iter_mut().for_each(|v| *v *= c);
        }
    }
    out
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_rows<T: Scalar>(src: &[T], cols: usize, out: &mut [T]) {
    if cols == 0 {
        return;
    }
    for (row, o) in src.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            let e = (v - max).exp();
            *dst = e;
            total += e;
        }
        let inv = T::one() / total;
        for dst in o.iter_mut() {
            *dst *= inv;
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Value-equal copy that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// `a · b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, the linear-layer product for weights stored as `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2(op)?;
        let (br, bc) = tb.dims2(op)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch(op, ta, tb));
        }
        let mut out = Tensor::zeros([m, n]);
        if m > 0 && n > 0 && k > 0 {
            let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                ta.data(),
                k as isize,
                1,
                tb.data(),
                rsb,
                csb,
                T::zero(),
                out.data_mut(),
                n as isize,
                1,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let cols = *ta.shape().last().unwrap_or(&1);
        if tr.shape() != [cols] || ta.shape().len() != 2 {
            return Err(mismatch(op, ta, tr));
        }
        Ok(cols)
    }

    /// `x·Wᵀ + Σ cᵢ (x·Aᵢᵀ)·Bᵢᵀ` as one node, with `W: [out, in]`,
    /// `Aᵢ: [r, in]`, `Bᵢ: [out, r]` and scalar `cᵢ`.
    pub fn linear_lora(&mut self, x: Var, w: Var, lora: &[LoraTerm]) -> Result<Var> {
        if lora.is_empty() {
            return self.matmul_nt(x, w);
        }
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (n, d_in) = tx.dims2("linear_lora")?;
        let (d_out, wi) = tw.dims2("linear_lora")?;
        if wi != d_in {
            return Err(mismatch("linear_lora", tx, tw));
        }
        for t in lora {
            let (ta, tb, tc) = (&self.nodes[t.a.0].value, &self.nodes[t.b.0].value, &self.nodes[t.coef.0].value);
            let (r, ai) = ta.dims2("linear_lora")?;
            if ai != d_in || tb.shape() != [d_out, r] || tc.numel() != 1 {
                return Err(mismatch("linear_lora", ta, tb));
            }
        }
        let (a_cat, b_cat, coefs, offs) = self.stack_lora(lora, d_in, d_out);
        let rank = offs[lora.len()];
        let mut xa = vec![T::zero(); n * rank];
        let mut out = Tensor::zeros([n, d_out]);
        let xd = self.nodes[x.0].value.data();
        if n > 0 && d_in > 0 && d_out > 0 {
            let wd = self.nodes[w.0].value.data();
            T::gemm(n, d_in, d_out, T::one(), xd, d_in as isize, 1, wd, 1, d_in as isize, T::zero(), out.data_mut(), d_out as isize, 1);
        }
        if n > 0 && rank > 0 {
            T::gemm(n, d_in, rank, T::one(), xd, d_in as isize, 1, &a_cat, 1, d_in as isize, T::zero(), &mut xa, rank as isize, 1);
            let xs = scale_cols(&xa, rank, &coefs, &offs);
            T::gemm(n, rank, d_out, T::one(), &xs, rank as isize, 1, &b_cat, 1, rank as isize, T::one(), out.data_mut(), d_out as isize, 1);
        }
        let mut inputs = vec![x, w];
        inputs.extend(lora.iter().flat_map(|t| [t.a, t.b, t.coef]));
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::LowRank { x, w, lora: lora.to_vec(), xa }, rg))
    }

    /// Row-stacked `A`s `[R, in]`, column-stacked `B`s `[out, R]`, the
    /// coefficients and the rank offsets.
    fn stack_lora(&self, lora: &[LoraTerm], d_in: usize, d_out: usize) -> (Vec<T>, Vec<T>, Vec<T>, Vec<usize>) {
        let mut offs = vec![0];
        for t in lora {
            offs.push(offs.last().unwrap() + self.nodes[t.a.0].value.shape()[0]);
        }
        let rank = offs[lora.len()];
        let mut a_cat = Vec::with_capacity(rank * d_in);
        let mut b_cat = vec![T::zero(); d_out * rank];
        let mut coefs = Vec::with_capacity(lora.len());
        for (i, t) in lora.iter().enumerate() {
            a_cat.extend_from_slice(self.nodes[t.a.0].value.data());
            let (o, r) = (offs[i], offs[i + 1] - offs[i]);
            for (dst, src) in b_cat.chunks_exact_mut(rank).zip(self.nodes[t.b.0].value.data().chunks_exact(r.max(1))) {
                dst[o..o + r].copy_from_slice(&src[..r]);
            }
            coefs.push(self.nodes[t.coef.0].value.item());
        }
        (a_cat, b_cat, coefs, offs)
    }

    /// Adds two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` row vector to every row of an `[m, n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand("add_row", a, row)?;
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let mut out = ta.clone();
        if cols > 0 {
            for r in out.data_mut().chunks_exact_mut(cols) {
                for (x, &b) in r.iter_mut().zip(tr.data()) {
                    *x += b;
                }
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every row of an `[m, n]` tensor element-wise by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand("mul_row", a, row)?;
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let mut out = ta.clone();
        if cols > 0 {
            for r in out.data_mut().chunks_exact_mut(cols) {
                for (x, &b) in r.iter_mut().zip(tr.data()) {
                    *x *= b;
                }
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::from_fn(ta.shape().to_vec(), |i| ta.data()[i] * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies by a one-element tensor that may itself require a gradient.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        if ts.numel() != 1 {
            return Err(mismatch("mul_scalar", ta, ts));
        }
        let sv = ts.item();
        let out = Tensor::from_fn(ta.shape().to_vec(), |i| ta.data()[i] * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    /// Element `idx` of the flattened tensor, as a scalar.
    pub fn select(&mut self, a: Var, idx: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let Some(&v) = ta.data().get(idx) else {
            return Err(Error::invalid(format!("select: index {idx} out of {:?}", ta.shape())));
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Select(a, idx), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::from_fn(ta.shape().to_vec(), |i| f(ta.data()[i]));
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(), Op::Softplus(a))
    }

    fn last_dim(&self, a: Var) -> usize {
        *self.nodes[a.0].value.shape().last().unwrap_or(&1)
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let cols = self.last_dim(a);
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(ta.shape().to_vec());
        softmax_rows(ta.data(), cols, out.data_mut());
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let cols = self.last_dim(a);
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(ta.shape().to_vec());
        if cols > 0 {
            for (row, o) in ta.data().chunks_exact(cols).zip(out.data_mut().chunks_exact_mut(cols)) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                for (dst, &v) in o.iter_mut().zip(row) {
                    *dst = v - lse;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Row-wise RMS normalization followed by a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let cols = self.row_operand("rms_norm", x, gain)?;
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let eps = T::of(eps);
        let mut out = tx.clone();
        let rows = if cols == 0 { 0 } else { tx.numel() / cols };
        let mut inv_rms = Vec::with_capacity(rows);
        if cols > 0 {
            let inv_n = T::one() / T::of(cols as f64);
            for r in out.data_mut().chunks_exact_mut(cols) {
                let ms = r.iter().map(|&v| v * v).sum::<T>() * inv_n;
                let inv = T::one() / (ms + eps).sqrt();
                inv_rms.push(inv);
                for (v, &g) in r.iter_mut().zip(tg.data()) {
                    *v = *v * inv * g;
                }
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (vocab, d) = tt.dims2("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(format!("embedding: id {id} >= vocab {vocab}")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new([ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.transposed()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Replaces every position where `mask` is set with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: T) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if mask.len() != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = Tensor::from_fn(ta.shape().to_vec(), |i| if mask[i] { value } else { ta.data()[i] });
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaskedFill { x: a, mask: mask.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean negative log-likelihood of integer targets under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (rows, cols) = tl.dims2("cross_entropy")?;
        if rows != targets.len() || rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![T::zero(); rows * cols];
        softmax_rows(tl.data(), cols, &mut probs);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::invalid(format!("cross_entropy: target {t} >= {cols}")));
            }
            let row = tl.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let loss = total / T::of(rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean over rows of `-Σ_j target_j · log softmax(logits)_j`. The target
    /// distribution is a constant; pass a detached value.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (rows, cols) = tl.dims2("soft_cross_entropy")?;
        if tl.shape() != target.shape() || rows == 0 {
            return Err(mismatch("soft_cross_entropy", tl, target));
        }
        let mut probs = vec![T::zero(); rows * cols];
        softmax_rows(tl.data(), cols, &mut probs);
        let mut total = T::zero();
        for r in 0..rows {
            let row = tl.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (&p, &z) in target.row(r).iter().zip(row) {
                if p != T::zero() {
                    total -= p * (z - lse);
                }
            }
        }
        let loss = total / T::of(rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, target: target.clone(), probs },
            rg,
        ))
    }

    /// Fused causal multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `[n_seq * seq_len, n_heads * d_head]` with sequences
    /// stacked along rows; the result has the same shape and holds each
    /// head's context vectors in that head's column block.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_seq: usize,
        seq_len: usize,
        n_heads: usize,
        d_head: usize,
    ) -> Result<Var> {
        let width = n_heads * d_head;
        let expected = [n_seq * seq_len, width];
        for x in [q, k, v] {
            let t = &self.nodes[x.0].value;
            if t.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention",
                    lhs: t.shape().to_vec(),
                    rhs: expected.to_vec(),
                });
            }
        }
        let geom = AttnGeom { n_seq, seq_len, n_heads, d_head };
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let tt = seq_len * seq_len;
        let mut probs = vec![T::zero(); n_seq * n_heads * tt];
        let mut out = Tensor::zeros(expected);
        let scale = T::one() / T::of(d_head as f64).sqrt();
        let w = width as isize;
        if width > 0 && seq_len > 0 {
            let mut scores = vec![T::zero(); tt];
            for b in 0..n_seq {
                let row0 = b * seq_len * width;
                for h in 0..n_heads {
                    let off = row0 + h * d_head;
                    T::gemm(
                        seq_len,
                        d_head,
                        seq_len,
                        scale,
                        &tq.data()[off..],
                        w,
                        1,
                        &tk.data()[off..],
                        1,
                        w,
                        T::zero(),
                        &mut scores,
                        seq_len as isize,
                        1,
                    );
                    let p = &mut probs[(b * n_heads + h) * tt..][..tt];
                    for i in 0..seq_len {
                        let srow = &scores[i * seq_len..][..=i];
                        let prow = &mut p[i * seq_len..][..=i];
                        softmax_rows(srow, i + 1, prow);
                    }
                    T::gemm(
                        seq_len,
                        seq_len,
                        d_head,
                        T::one(),
                        p,
                        seq_len as isize,
                        1,
                        &tv.data()[off..],
                        w,
                        1,
                        T::zero(),
                        &mut out.data_mut()[off..],
                        w,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, geom, probs }, rg))
    }

    /// Reverse-mode pass from a scalar `loss`. Returns the gradients of all
    /// trainable leaves; intermediate gradients are released as the tape is
    /// unwound.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any trainable tensor".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op, node.requires_grad) {
                    (Some(g), Op::Leaf, true) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Zero-initialised accumulation buffer for `v`.
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                let bc = tb.shape()[1] as isize;
                if needs(a) {
                    // dA[m,k] = dC[m,n] · Bᵀ
                    let (rsb, csb) = if trans_b { (bc, 1) } else { (1, bc) };
                    let da = slot(grads, a, m * k);
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, tb.data(), rsb, csb, T::one(), da, k as isize, 1);
                }
                if needs(b) {
                    let db = slot(grads, b, k * n);
                    if trans_b {
                        // dB[n,k] = dCᵀ · A
                        T::gemm(n, m, k, T::one(), g, 1, n as isize, ta.data(), k as isize, 1, T::one(), db, k as isize, 1);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        T::gemm(k, m, n, T::one(), ta.data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
                    }
                }
            }
            Op::LowRank { x, w, lora, xa } => {
                let (x, w) = (*x, *w);
                let (tx, tw) = (val(x), val(w));
                let (n, d_in) = (tx.shape()[0], tx.shape()[1]);
                let d_out = tw.shape()[0];
                // base product: same gradients as matmul_nt
                if n > 0 && d_in > 0 && d_out > 0 {
                    if needs(x) {
                        let dx = slot(grads, x, n * d_in);
                        T::gemm(n, d_out, d_in, T::one(), g, d_out as isize, 1, tw.data(), d_in as isize, 1, T::one(), dx, d_in as isize, 1);
                    }
                    if needs(w) {
                        let dw = slot(grads, w, d_out * d_in);
                        T::gemm(d_out, n, d_in, T::one(), g, 1, d_out as isize, tx.data(), d_in as isize, 1, T::one(), dw, d_in as isize, 1);
                    }
                }
                let (a_cat, b_cat, coefs, offs) = self.stack_lora(lora, d_in, d_out);
                let rank = offs[lora.len()];
                if n == 0 || rank == 0 || d_out == 0 {
                    return;
                }
                // t = dY·B_cat  [n, R]
                let mut t = vec![T::zero(); n * rank];
                T::gemm(n, d_out, rank, T::one(), g, d_out as isize, 1, &b_cat, rank as isize, 1, T::zero(), &mut t, rank as isize, 1);
                let ts = scale_cols(&t, rank, &coefs, &offs);
                if needs(x) && d_in > 0 {
                    let dx = slot(grads, x, n * d_in);
                    T::gemm(n, rank, d_in, T::one(), &ts, rank as isize, 1, &a_cat, d_in as isize, 1, T::one(), dx, d_in as isize, 1);
                }
                let xs = scale_cols(xa, rank, &coefs, &offs);
                for (i, term) in lora.iter().enumerate() {
                    let (o, r) = (offs[i], offs[i + 1] - offs[i]);
                    if r == 0 {
                        continue;
                    }
                    if needs(term.a) && d_in > 0 {
                        // dA_i = (t·c_i)ᵀ[:, block]·x  [r, in]
                        let da = slot(grads, term.a, r * d_in);
                        T::gemm(r, n, d_in, T::one(), &ts[o..], 1, rank as isize, tx.data(), d_in as isize, 1, T::one(), da, d_in as isize, 1);
                    }
                    if needs(term.b) {
                        // dB_i = dYᵀ·(x·A_iᵀ·c_i)  [out, r]
                        let db = slot(grads, term.b, d_out * r);
                        T::gemm(d_out, n, r, T::one(), g, 1, d_out as isize, &xs[o..], rank as isize, 1, T::one(), db, r as isize, 1);
                    }
                    if needs(term.coef) {
                        let mut dot = T::zero();
                        for (trow, xrow) in t.chunks_exact(rank).zip(xa.chunks_exact(rank)) {
                            for j in o..o + r {
                                dot += trow[j] * xrow[j];
                            }
                        }
                        slot(grads, term.coef, 1)[0] += dot;
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if needs(x) {
                        let d = slot(grads, x, g.len());
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if needs(a) {
                    let d = slot(grads, a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if needs(row) {
                    let cols = val(row).numel();
                    let d = slot(grads, row, cols);
                    if cols > 0 {
                        for r in g.chunks_exact(cols) {
                            d.iter_mut().zip(r).for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if needs(a) {
                    let d = slot(grads, a, g.len());
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                }
                if needs(b) {
                    let d = slot(grads, b, g.len());
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let (ta, tr) = (val(a), val(row));
                let cols = tr.numel();
                if cols == 0 {
                    return;
                }
                if needs(a) {
                    let d = slot(grads, a, g.len());
                    for (drow, grow) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((d, &g), &s) in drow.iter_mut().zip(grow).zip(tr.data()) {
                            *d += g * s;
                        }
                    }
                }
                if needs(row) {
                    let d = slot(grads, row, cols);
                    for (grow, xrow) in g.chunks_exact(cols).zip(ta.data().chunks_exact(cols)) {
                        for ((d, &g), &x) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                let d = slot(grads, a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s);
            }
            &Op::MulScalar(a, s) => {
                let (ta, ts) = (val(a), val(s));
                if needs(a) {
                    let sv = ts.item();
                    let d = slot(grads, a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * sv);
                }
                if needs(s) {
                    let dot: T = g.iter().zip(ta.data()).map(|(&g, &x)| g * x).sum();
                    slot(grads, s, 1)[0] += dot;
                }
            }
            &Op::Select(a, idx) => {
                let len = val(a).numel();
                slot(grads, a, len)[idx] += g[0];
            }
            &Op::Silu(a) => {
                let ta = val(a);
                let d = slot(grads, a, g.len());
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                    let s = sigmoid(x);
                    *d += g * s * (T::one() + x * (T::one() - s));
                }
            }
            &Op::Softplus(a) => {
                let ta = val(a);
                let d = slot(grads, a, g.len());
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                    *d += g * sigmoid(x);
                }
            }
            &Op::Softmax(a) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                if cols == 0 {
                    return;
                }
                let d = slot(grads, a, g.len());
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(node.value.data().chunks_exact(cols))
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                if cols == 0 {
                    return;
                }
                let d = slot(grads, a, g.len());
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(node.value.data().chunks_exact(cols))
                {
                    let total: T = grow.iter().copied().sum();
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += g - y.exp() * total;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let (tx, tg) = (val(x), val(gain));
                let cols = tg.numel();
                if cols == 0 {
                    return;
                }
                if needs(gain) {
                    let d = slot(grads, gain, cols);
                    for ((grow, xrow), &inv) in g.chunks_exact(cols).zip(tx.data().chunks_exact(cols)).zip(inv_rms) {
                        for ((d, &g), &xv) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * xv * inv;
                        }
                    }
                }
                if needs(x) {
                    let inv_n = T::one() / T::of(cols as f64);
                    let d = slot(grads, x, g.len());
                    for (((drow, grow), xrow), &inv) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(tx.data().chunks_exact(cols))
                        .zip(inv_rms)
                    {
                        // dx = r·(ĝ − x̂·mean(ĝ⊙x̂)) with ĝ = g⊙gain, x̂ = x·r
                        let dot: T = grow
                            .iter()
                            .zip(xrow)
                            .zip(tg.data())
                            .map(|((&g, &xv), &w)| g * w * xv * inv)
                            .sum::<T>()
                            * inv_n;
                        for (((d, &g), &xv), &w) in drow.iter_mut().zip(grow).zip(xrow).zip(tg.data()) {
                            *d += inv * (g * w - xv * inv * dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let (vocab, d) = (val(table).shape()[0], val(table).shape()[1]);
                let dt = slot(grads, table, vocab * d);
                for (grow, &id) in g.chunks_exact(d.max(1)).zip(ids) {
                    dt[id * d..(id + 1) * d].iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
                let d = slot(grads, a, r * c);
                // output is [c, r]
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            &Op::Reshape(a) => {
                let d = slot(grads, a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            Op::MaskedFill { x, mask } => {
                let d = slot(grads, *x, g.len());
                for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += g;
                    }
                }
            }
            &Op::Sum(a) => {
                let len = val(a).numel();
                slot(grads, a, len).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean(a) => {
                let len = val(a).numel();
                let gv = g[0] / T::of(len.max(1) as f64);
                slot(grads, a, len).iter_mut().for_each(|d| *d += gv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let gv = g[0] / T::of(rows as f64);
                let d = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let drow = &mut d[r * cols..(r + 1) * cols];
                    for (dv, &p) in drow.iter_mut().zip(&probs[r * cols..]) {
                        *dv += gv * p;
                    }
                    drow[t] -= gv;
                }
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let (rows, cols) = (target.shape()[0], target.shape()[1]);
                let gv = g[0] / T::of(rows as f64);
                let d = slot(grads, *logits, probs.len());
                for r in 0..rows {
                    let trow = target.row(r);
                    let mass: T = trow.iter().copied().sum();
                    for ((dv, &p), &t) in d[r * cols..(r + 1) * cols].iter_mut().zip(&probs[r * cols..]).zip(trow) {
                        *dv += gv * (p * mass - t);
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, *geom, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttnGeom { n_seq, seq_len, n_heads, d_head } = geom;
        let width = n_heads * d_head;
        if width == 0 || seq_len == 0 {
            return;
        }
        let len = n_seq * seq_len * width;
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut dq = vec![T::zero(); len];
        let mut dk = vec![T::zero(); len];
        let mut dv = vec![T::zero(); len];
        let tt = seq_len * seq_len;
        let t = seq_len as isize;
        let w = width as isize;
        let scale = T::one() / T::of(d_head as f64).sqrt();
        let mut dp = vec![T::zero(); tt];
        for b in 0..n_seq {
            let row0 = b * seq_len * width;
            for h in 0..n_heads {
                let off = row0 + h * d_head;
                let p = &probs[(b * n_heads + h) * tt..][..tt];
                // dP = dCtx · Vᵀ
                T::gemm(seq_len, d_head, seq_len, T::one(), &g[off..], w, 1, &tv.data()[off..], 1, w, T::zero(), &mut dp, t, 1);
                // dV += Pᵀ · dCtx
                T::gemm(seq_len, seq_len, d_head, T::one(), p, 1, t, &g[off..], w, 1, T::one(), &mut dv[off..], w, 1);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)); reuse dp in place
                for i in 0..seq_len {
                    let prow = &p[i * seq_len..][..seq_len];
                    let drow = &mut dp[i * seq_len..][..seq_len];
                    let dot: T = drow[..=i].iter().zip(&prow[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..seq_len {
                        drow[j] = if j <= i { prow[j] * (drow[j] - dot) } else { T::zero() };
                    }
                }
                // dQ += scale · dS · K ; dK += scale · dSᵀ · Q
                T::gemm(seq_len, seq_len, d_head, scale, &dp, t, 1, &tk.data()[off..], w, 1, T::one(), &mut dq[off..], w, 1);
                T::gemm(seq_len, seq_len, d_head, scale, &dp, 1, t, &tq.data()[off..], w, 1, T::one(), &mut dk[off..], w, 1);
            }
        }
        for (x, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[x.0].requires_grad {
                match &mut grads[x.0] {
                    Some(acc) => acc.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(buf),
                }
            }
        }
    }
}
