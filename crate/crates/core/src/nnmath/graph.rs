//! Reverse-mode differentiation tape over 2-D dense arrays.
//!
//! A [`Graph`] borrows the [`ParamStore`] read-only; parameter leaves refer
//! to the stored values instead of copying them. One backward pass yields a
//! [`Gradients`] set that the caller folds into the store.

use std::collections::HashSet;

use super::array::{DenseArray, Real};
use super::kernels::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_row};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Result, WvlpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent attention problem inside a fused attention node: queries
/// `q_start..q_start+q_len` attend to keys `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Self-attention within rows `start..start+len`.
    pub fn within(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

/// Retained softmax weights of a fused attention node; `probs[s * n_heads + m]`
/// is `[q_len, k_len]` for segment `s`, head `m`.
#[derive(Debug)]
pub struct AttentionProbs<T> {
    pub segments: Vec<Segment>,
    pub n_heads: usize,
    pub probs: Vec<DenseArray<T>>,
}

impl<T> AttentionProbs<T> {
    pub fn get(&self, segment: usize, head: usize) -> &DenseArray<T> {
        &self.probs[segment * self.n_heads + head]
    }
}

/// Class-id targets or probability rows for cross-entropy.
#[derive(Clone, Debug)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    Soft(DenseArray<T>),
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Rows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Targets<T>,
        probs: DenseArray<T>,
    },
    SquaredError {
        x: Var,
        target: DenseArray<T>,
    },
    Cosine(Var, Var),
    CosineRows {
        a: Var,
        b: Var,
        norms: Vec<(T, T)>,
    },
    GroupMean(Var, Vec<Vec<usize>>),
    Reshape(Var),
    Sum(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
        attn: AttentionProbs<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Rows(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a)
            | Op::GroupMean(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::CosineRows { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(v) | Op::ConcatCols(v) | Op::Sum(v) => v.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SquaredError { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<T> {
    value: Option<DenseArray<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn shape_err<T: Real>(what: &str, a: &DenseArray<T>, b: &DenseArray<T>) -> WvlpError {
    WvlpError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).scalar_value()
    }

    fn push(&mut self, value: DenseArray<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseArray<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.params.get(id).trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Parameters that have a leaf in this graph.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| ParamId(i)))
            .collect()
    }

    /// Whether `node` is reachable backwards from `output`.
    pub fn depends_on(&self, output: Var, node: Var) -> bool {
        let mut stack = vec![output];
        let mut seen = HashSet::new();
        while let Some(v) = stack.pop() {
            if v == node {
                return true;
            }
            if v.0 < node.0 || !seen.insert(v) {
                continue;
            }
            stack.extend(self.nodes[v.0].op.inputs());
        }
        false
    }

    // ---- forward ops -------------------------------------------------------

    /// `a[n,k] · b[k,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        let (n, k, m) = (x.rows(), x.cols(), y.cols());
        let mut out = vec![T::zero(); n * m];
        matmul_acc(x.values(), y.values(), &mut out, n, k, m);
        Ok(self.push(DenseArray::matrix(n, m, out), Op::MatMul(a, b)))
    }

    /// `a[n,k] · b[m,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(shape_err("matmul_bt", x, y));
        }
        let (n, k, m) = (x.rows(), x.cols(), y.rows());
        let mut out = vec![T::zero(); n * m];
        matmul_bt_acc(x.values(), y.values(), &mut out, n, k, m);
        Ok(self.push(DenseArray::matrix(n, m, out), Op::MatMulBt(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<DenseArray<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(shape_err(what, x, y));
        }
        let vals = x
            .values()
            .iter()
            .zip(y.values())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Ok(DenseArray::matrix(x.rows(), x.cols(), vals))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the `[1,m]` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let mut out = x.clone();
        let cols = x.cols();
        for i in 0..x.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.values()) {
                *o += b;
            }
        }
        let out = DenseArray::matrix(x.rows(), cols, out.into_values());
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_row(out.row_mut(r), None);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise softmax where columns with `keep[j] == false` get zero mass
    /// (equivalent to −∞ logits). At least one column must be kept.
    pub fn softmax_masked(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let mut out = self.value(a).clone();
        if keep.len() != out.cols() || !keep.iter().any(|&k| k) {
            return Err(WvlpError::Shape(format!(
                "softmax mask of {} entries ({} kept) for {} columns",
                keep.len(),
                keep.iter().filter(|&&k| k).count(),
                out.cols()
            )));
        }
        for r in 0..out.rows() {
            softmax_row(out.row_mut(r), Some(keep));
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm gain", xv, gv));
        }
        let n = xv.rows();
        let dt = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.values()[j] + bv.values()[j];
            }
        }
        Ok(self.push(
            DenseArray::matrix(n, d, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    /// Gathers rows `idx` of `a` (embedding lookup, masked-position selection).
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n = x.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(WvlpError::TokenOutOfRange { id: bad, vocab: n });
        }
        let cols = x.cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(x.row(i));
        }
        Ok(self.push(
            DenseArray::matrix(idx.len(), cols, out),
            Op::Rows(a, idx.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), x));
            }
            rows += x.rows();
            out.extend_from_slice(x.values());
        }
        Ok(self.push(
            DenseArray::matrix(rows, cols, out),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(WvlpError::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            DenseArray::matrix(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(WvlpError::Shape(format!(
                "slice_cols {start}+{len} beyond {} columns",
                x.cols()
            )));
        }
        let mut out = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(
            DenseArray::matrix(x.rows(), len, out),
            Op::SliceCols(a, start),
        ))
    }

    /// Mean over rows, giving `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.rows();
        if n == 0 {
            return Err(WvlpError::Empty("mean over zero rows".into()));
        }
        let mut out = vec![T::zero(); x.cols()];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(n as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(DenseArray::row_vector(out), Op::MeanRows(a)))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Targets<T>) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = (x.rows(), x.cols());
        if n == 0 {
            return Err(WvlpError::Empty("cross-entropy over zero rows".into()));
        }
        match &targets {
            Targets::Classes(ids) => {
                if ids.len() != n {
                    return Err(WvlpError::Shape(format!(
                        "{} targets for {n} rows",
                        ids.len()
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&c| c >= k) {
                    return Err(WvlpError::TokenOutOfRange { id: bad, vocab: k });
                }
            }
            Targets::Soft(p) => {
                if p.rows() != n || p.cols() != k {
                    return Err(shape_err("soft targets", x, p));
                }
            }
        }
        let mut probs = x.clone();
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            match &targets {
                Targets::Classes(ids) => loss += (lse - row[ids[r]]).as_f64(),
                Targets::Soft(p) => {
                    for (c, &pc) in p.row(r).iter().enumerate() {
                        if pc != T::zero() {
                            loss += (pc * (lse - row[c])).as_f64();
                        }
                    }
                }
            }
            softmax_row(probs.row_mut(r), None);
        }
        let out = DenseArray::scalar(T::of(loss / n as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// `(1/n) Σ_r ‖x_r − target_r‖²`
    pub fn squared_error(&mut self, x: Var, target: DenseArray<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != target.rows() || xv.cols() != target.cols() {
            return Err(shape_err("squared_error", xv, &target));
        }
        if xv.rows() == 0 {
            return Err(WvlpError::Empty("squared error over zero rows".into()));
        }
        let sum: T = xv
            .values()
            .iter()
            .zip(target.values())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let out = DenseArray::scalar(sum / T::of(xv.rows() as f64));
        Ok(self.push(out, Op::SquaredError { x, target }))
    }

    /// Cosine similarity of two `[1,d]` rows.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() || x.rows() != 1 {
            return Err(shape_err("cosine", x, y));
        }
        let (na, nb) = (
            dot(x.values(), x.values()).sqrt(),
            dot(y.values(), y.values()).sqrt(),
        );
        if na == T::zero() || nb == T::zero() {
            return Err(WvlpError::Contract("cosine of a zero-norm vector".into()));
        }
        let c = dot(x.values(), y.values()) / (na * nb);
        Ok(self.push(DenseArray::scalar(c), Op::Cosine(a, b)))
    }

    /// Row-wise cosine similarity of two `[n, d]` nodes, giving `[n, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(shape_err("cosine_rows", x, y));
        }
        let mut out = Vec::with_capacity(x.rows());
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let (xr, yr) = (x.row(r), y.row(r));
            let (na, nb) = (dot(xr, xr).sqrt(), dot(yr, yr).sqrt());
            if na == T::zero() || nb == T::zero() {
                return Err(WvlpError::Contract(format!(
                    "cosine of a zero-norm vector (row {r})"
                )));
            }
            out.push(dot(xr, yr) / (na * nb));
            norms.push((na, nb));
        }
        let n = out.len();
        Ok(self.push(
            DenseArray::matrix(n, 1, out),
            Op::CosineRows { a, b, norms },
        ))
    }

    /// Mean of the listed rows for each group, giving `[groups, cols]`.
    pub fn group_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let x = self.value(a);
        let (n, cols) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); groups.len() * cols];
        for (gi, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                return Err(WvlpError::Empty(format!("group {gi} has no rows to pool")));
            }
            let o = &mut out[gi * cols..(gi + 1) * cols];
            for &r in idx {
                if r >= n {
                    return Err(WvlpError::Shape(format!("row {r} of {n}")));
                }
                o.iter_mut().zip(x.row(r)).for_each(|(o, &v)| *o += v);
            }
            let inv = T::one() / T::of(idx.len() as f64);
            o.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(self.push(
            DenseArray::matrix(groups.len(), cols, out),
            Op::GroupMean(a, groups.to_vec()),
        ))
    }

    /// Same values in row-major order under a new `[rows, cols]` shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if x.len() != rows * cols {
            return Err(WvlpError::Shape(format!(
                "cannot reshape {:?} to [{rows}, {cols}]",
                x.shape()
            )));
        }
        let v = DenseArray::matrix(rows, cols, x.values().to_vec());
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let x = self.value(p);
            if x.len() != out.len() {
                return Err(shape_err("sum", &out, x));
            }
            out.add_assign(x);
        }
        Ok(self.push(out, Op::Sum(parts.to_vec())))
    }

    /// Fused multi-head scaled dot-product attention over independent
    /// segments. `q`, `k` are `[*, M·d_k]`, `v` is `[*, M·d_v]`; output rows
    /// not covered by any segment stay zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qd, kd, vd) = (qv.cols(), kv.cols(), vv.cols());
        if n_heads == 0 || qd % n_heads != 0 || vd % n_heads != 0 {
            return Err(WvlpError::Config(format!(
                "{n_heads} heads do not divide query width {qd} / value width {vd}"
            )));
        }
        if qd != kd {
            return Err(WvlpError::Shape(format!(
                "query width {qd} differs from key width {kd}"
            )));
        }
        if kv.rows() != vv.rows() {
            return Err(WvlpError::Shape(
                "keys and values have different counts".into(),
            ));
        }
        for s in segments {
            if s.q_len == 0
                || s.k_len == 0
                || s.q_start + s.q_len > qv.rows()
                || s.k_start + s.k_len > kv.rows()
            {
                return Err(WvlpError::Shape(format!(
                    "attention segment {s:?} outside {} queries / {} keys",
                    qv.rows(),
                    kv.rows()
                )));
            }
        }
        let (dk, dv) = (qd / n_heads, vd / n_heads);
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let mut out = vec![T::zero(); qv.rows() * vd];
        let mut probs = Vec::with_capacity(segments.len() * n_heads);
        let (qa, ka, va) = (qv.values(), kv.values(), vv.values());
        for s in segments {
            for m in 0..n_heads {
                let mut p = vec![T::zero(); s.q_len * s.k_len];
                for i in 0..s.q_len {
                    let qr = &qa[(s.q_start + i) * qd + m * dk..][..dk];
                    let row = &mut p[i * s.k_len..(i + 1) * s.k_len];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = scale * dot(qr, &ka[(s.k_start + j) * qd + m * dk..][..dk]);
                    }
                    softmax_row(row, None);
                    let o = &mut out[(s.q_start + i) * vd + m * dv..][..dv];
                    for (j, &pij) in row.iter().enumerate() {
                        super::kernels::axpy(pij, &va[(s.k_start + j) * vd + m * dv..][..dv], o);
                    }
                }
                probs.push(DenseArray::matrix(s.q_len, s.k_len, p));
            }
        }
        let rows = qv.rows();
        Ok(self.push(
            DenseArray::matrix(rows, vd, out),
            Op::Attention {
                q,
                k,
                v,
                scale,
                attn: AttentionProbs {
                    segments: segments.to_vec(),
                    n_heads,
                    probs,
                },
            },
        ))
    }

    /// Softmax weights retained by a fused attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&AttentionProbs<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { attn, .. } => Some(attn),
            _ => None,
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<DenseArray<T>>> = (0..=loss.0).map(|_| None).collect();
        let seed = self.value(loss);
        grads[loss.0] = Some(DenseArray::matrix(
            seed.rows(),
            seed.cols(),
            vec![T::one(); seed.len()],
        ));
        let mut out = Gradients {
            per_param: vec![None; self.params.len()],
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(&node.op, Var(i), &g, &mut grads);
            if let Op::Param(id) = node.op {
                out.per_param[id.0] = Some(g);
            }
        }
        out
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<DenseArray<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let x = self.value(v);
            *slot = Some(DenseArray::matrix(
                x.rows(),
                x.cols(),
                vec![T::zero(); x.len()],
            ));
        }
        slot.as_mut().map(|a| a.values_mut())
    }

    fn backprop_node(
        &self,
        op: &Op<T>,
        out: Var,
        g: &DenseArray<T>,
        grads: &mut [Option<DenseArray<T>>],
    ) {
        let gv = g.values();
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, k, m) = (x.rows(), x.cols(), y.cols());
                if let Some(da) = self.grad_buf(grads, *a) {
                    matmul_bt_acc(gv, y.values(), da, n, m, k);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    matmul_at_acc(x.values(), gv, db, n, k, m);
                }
            }
            Op::MatMulBt(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, k, m) = (x.rows(), x.cols(), y.rows());
                if let Some(da) = self.grad_buf(grads, *a) {
                    matmul_acc(gv, y.values(), da, n, m, k);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    matmul_at_acc(gv, x.values(), db, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.grad_buf(grads, *v) {
                        d.iter_mut().zip(gv).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sum(parts) => {
                for v in parts {
                    if let Some(d) = self.grad_buf(grads, *v) {
                        d.iter_mut().zip(gv).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(gv).for_each(|(d, &g)| *d += g);
                }
                let cols = g.cols();
                if let Some(d) = self.grad_buf(grads, *row) {
                    for r in 0..g.rows() {
                        d.iter_mut()
                            .zip(&gv[r * cols..(r + 1) * cols])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(gv).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    d.iter_mut().zip(gv).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).values(), self.value(*b).values());
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gv[i] * y[i];
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += gv[i] * x[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(gv).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Softmax(a) => {
                let y = self.value(out);
                let cols = y.cols();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gv[r * cols..(r + 1) * cols];
                        let inner = dot(gr, yr);
                        for j in 0..cols {
                            d[r * cols + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gain_v = self.value(*gain).values();
                let d = g.cols();
                let n = g.rows();
                if let Some(dg) = self.grad_buf(grads, *gain) {
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += gv[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *bias) {
                    for r in 0..n {
                        for j in 0..d {
                            db[j] += gv[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dt = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gv[r * d + j] * gain_v[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                        let mean_dx = dot(&dxhat, xh) / dt;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).values();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gv[i] * gelu_grad(x[i]);
                    }
                }
            }
            Op::Rows(a, idx) => {
                let cols = g.cols();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        d[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&gv[r * cols..(r + 1) * cols])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(d) = self.grad_buf(grads, *p) {
                        d.iter_mut()
                            .zip(&gv[offset..offset + len])
                            .for_each(|(d, &g)| *d += g);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(d) = self.grad_buf(grads, *p) {
                        for r in 0..g.rows() {
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&gv[r * total + start..r * total + start + w])
                                .for_each(|(d, &g)| *d += g);
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let full = self.value(*a).cols();
                let w = g.cols();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for r in 0..g.rows() {
                        d[r * full + start..r * full + start + w]
                            .iter_mut()
                            .zip(&gv[r * w..(r + 1) * w])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows();
                let cols = g.cols();
                let inv = T::one() / T::of(n as f64);
                if let Some(d) = self.grad_buf(grads, *a) {
                    for r in 0..n {
                        for j in 0..cols {
                            d[r * cols + j] += gv[j] * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, k) = (probs.rows(), probs.cols());
                let scale = gv[0] / T::of(n as f64);
                if let Some(d) = self.grad_buf(grads, *logits) {
                    for r in 0..n {
                        let q = probs.row(r);
                        match targets {
                            Targets::Classes(ids) => {
                                for c in 0..k {
                                    let t = if c == ids[r] { T::one() } else { T::zero() };
                                    d[r * k + c] += scale * (q[c] - t);
                                }
                            }
                            Targets::Soft(p) => {
                                let pr = p.row(r);
                                let mass = pr.iter().copied().sum::<T>();
                                for c in 0..k {
                                    d[r * k + c] += scale * (q[c] * mass - pr[c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::SquaredError { x, target } => {
                let xv = self.value(*x).values();
                let scale = T::of(2.0) * gv[0] / T::of(target.rows() as f64);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += scale * (xv[i] - target.values()[i]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                attn,
            } => {
                let (qa, ka, va) = (
                    self.value(*q).values(),
                    self.value(*k).values(),
                    self.value(*v).values(),
                );
                let qd = self.value(*q).cols();
                let vd = self.value(*v).cols();
                let n_heads = attn.n_heads;
                let (dk, dv) = (qd / n_heads, vd / n_heads);
                let (nq, nk) = (self.value(*q).rows(), self.value(*k).rows());
                let mut dq = vec![T::zero(); nq * qd];
                let mut dkk = vec![T::zero(); nk * qd];
                let mut dvv = vec![T::zero(); nk * vd];
                for (si, s) in attn.segments.iter().enumerate() {
                    for m in 0..n_heads {
                        let p = attn.get(si, m).values();
                        let mut ds = vec![T::zero(); s.k_len];
                        for i in 0..s.q_len {
                            let go = &gv[(s.q_start + i) * vd + m * dv..][..dv];
                            let prow = &p[i * s.k_len..(i + 1) * s.k_len];
                            let mut inner = T::zero();
                            for j in 0..s.k_len {
                                let vj = (s.k_start + j) * vd + m * dv;
                                ds[j] = dot(go, &va[vj..vj + dv]);
                                inner += ds[j] * prow[j];
                                super::kernels::axpy(prow[j], go, &mut dvv[vj..vj + dv]);
                            }
                            let qi = (s.q_start + i) * qd + m * dk;
                            for j in 0..s.k_len {
                                let d = prow[j] * (ds[j] - inner) * *scale;
                                if d == T::zero() {
                                    continue;
                                }
                                let kj = (s.k_start + j) * qd + m * dk;
                                super::kernels::axpy(d, &ka[kj..kj + dk], &mut dq[qi..qi + dk]);
                                super::kernels::axpy(d, &qa[qi..qi + dk], &mut dkk[kj..kj + dk]);
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dkk), (*v, dvv)] {
                    if let Some(d) = self.grad_buf(grads, var) {
                        d.iter_mut().zip(&buf).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::CosineRows { a, b, norms } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let c = self.value(out).values();
                let cols = x.cols();
                for (var, this, other, first) in [(*a, x, y, true), (*b, y, x, false)] {
                    if let Some(d) = self.grad_buf(grads, var) {
                        for r in 0..norms.len() {
                            let (na, nb) = norms[r];
                            let own = if first { na } else { nb };
                            let (tr, or) = (this.row(r), other.row(r));
                            for j in 0..cols {
                                d[r * cols + j] +=
                                    gv[r] * (or[j] / (na * nb) - c[r] * tr[j] / (own * own));
                            }
                        }
                    }
                }
            }
            Op::GroupMean(a, groups) => {
                let cols = g.cols();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for (gi, idx) in groups.iter().enumerate() {
                        let inv = T::one() / T::of(idx.len() as f64);
                        for &r in idx {
                            for j in 0..cols {
                                d[r * cols + j] += gv[gi * cols + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(gv).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Cosine(a, b) => {
                let (x, y) = (self.value(*a).values(), self.value(*b).values());
                let (na, nb) = (dot(x, x).sqrt(), dot(y, y).sqrt());
                let c = self.value(out).scalar_value();
                let gs = gv[0];
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gs * (y[i] / (na * nb) - c * x[i] / (na * na));
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += gs * (x[i] / (na * nb) - c * y[i] / (nb * nb));
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GeLU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}
