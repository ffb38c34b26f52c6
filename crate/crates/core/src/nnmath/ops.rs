//! Differentiable building blocks composed from tape primitives.

use rand::Rng;

use super::array::{DenseArray, Real};
use super::graph::{Graph, Targets, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Result, WvlpError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x Wᵀ + b` with `W: [d_out, d_in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights ~ N(0, 1/d_in), zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(
            &format!("{name}.weight"),
            d_out,
            d_in,
            (1.0 / d_in as f64).sqrt(),
            rng,
        )?;
        let bias = if with_bias {
            Some(store.add_const(&format!("{name}.bias"), 1, d_out, 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        linear(g, x, self.weight, self.bias)
    }

    pub fn d_out<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).value.rows()
    }
}

pub fn linear<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    w: ParamId,
    b: Option<ParamId>,
) -> Result<Var> {
    let wv = g.param(w);
    let out = g.matmul_bt(x, wv).map_err(|_| {
        WvlpError::Shape(format!(
            "linear: input {:?} vs weight {:?}",
            g.value(x).shape(),
            g.value(wv).shape()
        ))
    })?;
    match b {
        Some(b) => {
            let bv = g.param(b);
            g.add_row(out, bv)
        }
        None => Ok(out),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_const(&format!("{name}.gain"), 1, d, 1.0)?,
            bias: store.add_const(&format!("{name}.bias"), 1, d, 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        layer_norm(g, x, self.gain, self.bias, LAYER_NORM_EPS)
    }
}

pub fn layer_norm<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    gain: ParamId,
    bias: ParamId,
    eps: f64,
) -> Result<Var> {
    if g.value(x).cols() < 2 {
        return Err(WvlpError::Shape(
            "layer_norm needs at least 2 features".into(),
        ));
    }
    let (gv, bv) = (g.param(gain), g.param(bias));
    g.layer_norm(x, gv, bv, eps)
}

pub fn softmax<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.softmax(x)
}

pub fn gelu<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.gelu(x)
}

pub fn cross_entropy<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: Targets<T>,
) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Output of one multi-head attention call. `probs[m]` is head `m`'s
/// `[n_queries, n_keys]` row-stochastic attention matrix.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub probs: Vec<Var>,
}

/// Scaled dot-product attention over already projected queries `[nq, M·d_k]`,
/// keys `[nk, M·d_k]` and values `[nk, M·d_v]`; head outputs are concatenated.
pub fn attention_heads<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    keep: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (qd, kd, vd) = (g.value(q).cols(), g.value(k).cols(), g.value(v).cols());
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
    if g.value(k).rows() != g.value(v).rows() {
        return Err(WvlpError::Shape(
            "keys and values have different counts".into(),
        ));
    }
    let (dk, dv) = (qd / n_heads, vd / n_heads);
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for m in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, m * dk, dk)?,
                g.slice_cols(k, m * dk, dk)?,
                g.slice_cols(v, m * dv, dv)?,
            )
        };
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let p = match keep {
            Some(keep) => g.softmax_masked(logits, keep)?,
            None => g.softmax(logits),
        };
        heads.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let output = if n_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok(AttentionOutput { output, probs })
}

/// Projection weights for one multi-head attention block, all heads stacked
/// row-wise: `W_Q: [M·d_k, d_q_in]`, `W_K: [M·d_k, d_kv_in]`, `W_V: [M·d_v, d_kv_in]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

pub fn multi_head_attention<T: Real>(
    g: &mut Graph<'_, T>,
    queries_in: Var,
    keys_in: Var,
    values_in: Var,
    proj: &AttentionProjections,
    n_heads: usize,
    keep: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let q = proj.query.forward(g, queries_in)?;
    let k = proj.key.forward(g, keys_in)?;
    let v = proj.value.forward(g, values_in)?;
    attention_heads(g, q, k, v, n_heads, keep)
}

/// Plain (non-tape) copy of a value, for reports.
pub fn snapshot<T: Real>(g: &Graph<'_, T>, v: Var) -> DenseArray<T> {
    g.value(v).clone()
}
