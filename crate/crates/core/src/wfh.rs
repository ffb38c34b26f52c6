//! Feature hallucinator: stacked self-attention + cross-attention into the
//! frozen visual dictionary, mapping token embeddings to visual vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WvlpError};
use crate::nnmath::{AttentionProjections, Graph, Linear, ParamStore, Real, Segment, Var};
use crate::vocab::VisualDictionary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WfhConfig {
    pub layers: usize,
    pub self_heads: usize,
    /// Cross-attention heads of layers `1..J`.
    pub cross_heads: usize,
    /// Cross-attention heads of layer `J`; must divide `d_v`.
    pub last_cross_heads: usize,
    /// Multiplier on the init std of every query/key projection. Without
    /// residuals a flat initial softmax averages token identity away, so the
    /// stack starts with sharper attention than a plain linear layer would.
    #[serde(default = "default_qk_gain")]
    pub qk_init_gain: f64,
}

fn default_qk_gain() -> f64 {
    3.0
}

impl Default for WfhConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            self_heads: 4,
            cross_heads: 4,
            last_cross_heads: 4,
            qk_init_gain: default_qk_gain(),
        }
    }
}

impl WfhConfig {
    pub fn validate(&self, d_model: usize, d_v: usize) -> Result<()> {
        if !(self.qk_init_gain > 0.0 && self.qk_init_gain.is_finite()) {
            return Err(WvlpError::Config(format!(
                "qk_init_gain = {} must be positive",
                self.qk_init_gain
            )));
        }
        if self.layers == 0 {
            return Err(WvlpError::Config(
                "the hallucinator needs at least one layer".into(),
            ));
        }
        let divides = |h: usize, d: usize| h > 0 && d.is_multiple_of(h);
        if !divides(self.self_heads, d_model) {
            return Err(WvlpError::Config(format!(
                "d_model = {d_model} is not divisible by {} self-attention heads",
                self.self_heads
            )));
        }
        if self.layers > 1 && !divides(self.cross_heads, d_model) {
            return Err(WvlpError::Config(format!(
                "d_model = {d_model} is not divisible by {} cross-attention heads",
                self.cross_heads
            )));
        }
        if !divides(self.last_cross_heads, d_v) || !divides(self.last_cross_heads, d_model) {
            return Err(WvlpError::Config(format!(
                "d_v = {d_v} (and d_model = {d_model}) must be divisible by {} last-layer heads",
                self.last_cross_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WfhLayer {
    pub index: usize,
    /// Query/key/value of the self-attention; no output projection.
    pub self_attn: AttentionProjections,
    pub self_heads: usize,
    /// Bias-free `W_Q [d_model, d_model]`, `W_K [d_model, d_v]`, `W_V [d_out, d_v]`.
    pub cross: AttentionProjections,
    pub cross_heads: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug)]
pub struct WfhStack {
    pub layers: Vec<WfhLayer>,
    pub d_model: usize,
    pub d_v: usize,
}

impl WfhStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &WfhConfig,
        d_model: usize,
        d_v: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(d_model, d_v)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for j in 0..cfg.layers {
            let last = j + 1 == cfg.layers;
            let p = format!("wfh.{j}");
            let d_out = if last { d_v } else { d_model };
            let lin = |s: &mut ParamStore<T>, name: &str, i, o, bias, r: &mut _| {
                Linear::new(s, &format!("{p}.{name}"), i, o, bias, r)
            };
            layers.push(WfhLayer {
                index: j,
                self_attn: AttentionProjections {
                    query: lin(store, "self.query", d_model, d_model, true, rng)?,
                    key: lin(store, "self.key", d_model, d_model, true, rng)?,
                    value: lin(store, "self.value", d_model, d_model, true, rng)?,
                },
                self_heads: cfg.self_heads,
                cross: AttentionProjections {
                    query: lin(store, "cross.query", d_model, d_model, false, rng)?,
                    key: lin(store, "cross.key", d_v, d_model, false, rng)?,
                    value: lin(store, "cross.value", d_v, d_out, false, rng)?,
                },
                cross_heads: if last {
                    cfg.last_cross_heads
                } else {
                    cfg.cross_heads
                },
                d_out,
            });
        }
        for l in &layers {
            for lin in [
                l.self_attn.query,
                l.self_attn.key,
                l.cross.query,
                l.cross.key,
            ] {
                let w = &mut store.get_mut(lin.weight).value;
                w.values_mut()
                    .iter_mut()
                    .for_each(|x| *x *= T::of(cfg.qk_init_gain));
            }
        }
        Ok(Self {
            layers,
            d_model,
            d_v,
        })
    }
}

/// The dictionary as a graph constant plus each layer's projected keys and
/// values, computed once per graph.
#[derive(Clone, Debug)]
pub struct DictionaryContext {
    pub entries: Var,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

pub fn prepare_dictionary<T: Real>(
    g: &mut Graph<'_, T>,
    stack: &WfhStack,
    dict: &VisualDictionary<T>,
) -> Result<DictionaryContext> {
    if dict.d_v() != stack.d_v {
        return Err(WvlpError::Shape(format!(
            "dictionary entries have d_v = {}, the hallucinator expects {}",
            dict.d_v(),
            stack.d_v
        )));
    }
    let entries = g.constant(dict.entries.clone());
    let mut keys = Vec::with_capacity(stack.layers.len());
    let mut values = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        keys.push(layer.cross.key.forward(g, entries)?);
        values.push(layer.cross.value.forward(g, entries)?);
    }
    Ok(DictionaryContext {
        entries,
        keys,
        values,
    })
}

#[derive(Clone, Debug)]
pub struct HallucinationOutput {
    /// `[n, d_v]` visual-space vectors.
    pub output: Var,
    /// Per layer: self-attention node (probabilities per segment and head).
    pub self_attention: Vec<Var>,
    /// Per layer: cross-attention node; one segment of `[n, C]` rows per head.
    pub cross_attention: Vec<Var>,
}

/// Multi-head self-attention within each segment; heads are concatenated.
pub fn wfh_self_attention<T: Real>(
    g: &mut Graph<'_, T>,
    layer: &WfhLayer,
    x: Var,
    segments: &[Segment],
) -> Result<Var> {
    let p = &layer.self_attn;
    let (q, k, v) = (
        p.query.forward(g, x)?,
        p.key.forward(g, x)?,
        p.value.forward(g, x)?,
    );
    g.attention(q, k, v, layer.self_heads, segments)
}

/// Every row attends over all `C` dictionary entries, per head.
pub fn wfh_cross_attention<T: Real>(
    g: &mut Graph<'_, T>,
    layer: &WfhLayer,
    states: Var,
    ctx: &DictionaryContext,
) -> Result<Var> {
    let n = g.value(states).rows();
    let (k, v) = (ctx.keys[layer.index], ctx.values[layer.index]);
    let c = g.value(k).rows();
    let q = layer.cross.query.forward(g, states)?;
    g.attention(
        q,
        k,
        v,
        layer.cross_heads,
        &[Segment {
            q_start: 0,
            q_len: n,
            k_start: 0,
            k_len: c,
        }],
    )
}

/// `H^J ∘ … ∘ H^1` over stacked token embeddings `[n, d_model]`; `segments`
/// delimit the independent token sequences.
pub fn hallucinate<T: Real>(
    g: &mut Graph<'_, T>,
    stack: &WfhStack,
    ctx: &DictionaryContext,
    x: Var,
    segments: &[Segment],
) -> Result<HallucinationOutput> {
    if g.value(x).cols() != stack.d_model {
        return Err(WvlpError::Shape(format!(
            "hallucinator input width {} differs from d_model = {}",
            g.value(x).cols(),
            stack.d_model
        )));
    }
    let mut h = x;
    let mut self_attention = Vec::with_capacity(stack.layers.len());
    let mut cross_attention = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let s = wfh_self_attention(g, layer, h, segments)?;
        h = wfh_cross_attention(g, layer, s, ctx)?;
        self_attention.push(s);
        cross_attention.push(h);
    }
    Ok(HallucinationOutput {
        output: h,
        self_attention,
        cross_attention,
    })
}

/// `(1/B) Σ_b ‖v^o_b − v_b‖²`
pub fn wfh_loss<T: Real>(
    g: &mut Graph<'_, T>,
    v_o: Var,
    v: &crate::nnmath::DenseArray<T>,
) -> Result<Var> {
    let got = g.value(v_o);
    if got.rows() != v.rows() || got.cols() != v.cols() {
        return Err(WvlpError::Shape(format!(
            "hallucinations {:?} against detector features {:?}",
            got.shape(),
            v.shape()
        )));
    }
    g.squared_error(v_o, v.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmath::gradcheck::{check_gradients, GradcheckConfig};
    use crate::nnmath::DenseArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        layers: usize,
        c: usize,
        seed: u64,
    ) -> (ParamStore<f64>, WfhStack, VisualDictionary<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cfg = WfhConfig {
            layers,
            self_heads: 2,
            cross_heads: 2,
            last_cross_heads: 2,
            ..WfhConfig::default()
        };
        let stack = WfhStack::new(&mut s, &cfg, 8, 6, &mut rng).unwrap();
        let entries = DenseArray::matrix(
            c,
            6,
            (0..c * 6)
                .map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.15)
                .collect(),
        );
        (s, stack, VisualDictionary::new(entries, 0.9).unwrap())
    }

    fn input(n: usize) -> DenseArray<f64> {
        DenseArray::matrix(
            n,
            8,
            (0..n * 8)
                .map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.3)
                .collect(),
        )
    }

    fn run(
        s: &ParamStore<f64>,
        stack: &WfhStack,
        d: &VisualDictionary<f64>,
        x: &DenseArray<f64>,
    ) -> DenseArray<f64> {
        let mut g = Graph::new(s);
        let ctx = prepare_dictionary(&mut g, stack, d).unwrap();
        let xv = g.constant(x.clone());
        let out = hallucinate(&mut g, stack, &ctx, xv, &[Segment::within(0, x.rows())]).unwrap();
        g.value(out.output).clone()
    }

    #[test]
    fn head_divisibility_checked() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = WfhConfig {
            layers: 1,
            self_heads: 2,
            cross_heads: 2,
            last_cross_heads: 4,
            ..WfhConfig::default()
        };
        assert!(matches!(
            WfhStack::new(&mut s, &bad, 8, 6, &mut rng),
            Err(WvlpError::Config(_))
        ));
        let zero = WfhConfig {
            layers: 0,
            ..WfhConfig::default()
        };
        assert!(zero.validate(8, 8).is_err());
        let self_bad = WfhConfig {
            self_heads: 3,
            ..WfhConfig::default()
        };
        assert!(self_bad.validate(8, 8).is_err());
    }

    #[test]
    fn output_width_is_dv_for_any_depth() {
        for j in 1..=3 {
            let (s, stack, d) = setup(j, 5, j as u64);
            let out = run(&s, &stack, &d, &input(4));
            assert_eq!(out.shape(), &[4, 6]);
            assert_eq!(stack.layers.len(), j);
            for l in &stack.layers[..j - 1] {
                assert_eq!(l.d_out, 8);
            }
        }
    }

    #[test]
    fn dictionary_dim_mismatch_rejected() {
        let (s, stack, _) = setup(1, 3, 1);
        let wrong = VisualDictionary::new(DenseArray::<f64>::zeros(&[3, 5]), 0.5).unwrap();
        let mut g = Graph::new(&s);
        assert!(matches!(
            prepare_dictionary(&mut g, &stack, &wrong),
            Err(WvlpError::Shape(_))
        ));
    }

    #[test]
    fn self_attention_single_token_is_value_projection() {
        let (s, stack, _) = setup(1, 3, 2);
        let mut g = Graph::new(&s);
        let x = g.constant(input(1));
        let out =
            wfh_self_attention(&mut g, &stack.layers[0], x, &[Segment::within(0, 1)]).unwrap();
        let v = stack.layers[0].self_attn.value.forward(&mut g, x).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(v)) < 1e-12);
    }

    #[test]
    fn self_attention_matches_brute_force() {
        let (s, stack, _) = setup(1, 3, 3);
        let layer = &stack.layers[0];
        let x = input(3);
        let mut g = Graph::new(&s);
        let xv = g.constant(x.clone());
        let out = wfh_self_attention(&mut g, layer, xv, &[Segment::within(0, 3)]).unwrap();
        let out = g.value(out).clone();
        let proj = |lin: &Linear| {
            let w = &s.get(lin.weight).value;
            let b = &s.get(lin.bias.unwrap()).value;
            let mut y = vec![vec![0.0; 8]; 3];
            for r in 0..3 {
                for o in 0..8 {
                    y[r][o] = b.get(0, o) + (0..8).map(|i| w.get(o, i) * x.get(r, i)).sum::<f64>();
                }
            }
            y
        };
        let (q, k, v) = (
            proj(&layer.self_attn.query),
            proj(&layer.self_attn.key),
            proj(&layer.self_attn.value),
        );
        for h in 0..2 {
            let cols = h * 4..h * 4 + 4;
            for r in 0..3 {
                let logits: Vec<f64> = (0..3)
                    .map(|c| cols.clone().map(|i| q[r][i] * k[c][i]).sum::<f64>() / 2.0)
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for i in cols.clone() {
                    let want: f64 = (0..3).map(|c| logits[c].exp() / z * v[c][i]).sum();
                    assert!((out.get(r, i) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_entry_dictionary_ignores_query() {
        let (s, stack, d) = setup(1, 1, 4);
        let a = run(&s, &stack, &d, &input(3));
        let wv = &s.get(stack.layers[0].cross.value.weight).value;
        for r in 0..3 {
            for o in 0..6 {
                let want: f64 = (0..6).map(|i| wv.get(o, i) * d.entries.get(0, i)).sum();
                assert!((a.get(r, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_query_selects_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::<f64>::new();
        let cfg = WfhConfig {
            layers: 1,
            self_heads: 1,
            cross_heads: 1,
            last_cross_heads: 1,
            ..WfhConfig::default()
        };
        let stack = WfhStack::new(&mut s, &cfg, 4, 4, &mut rng).unwrap();
        let layer = stack.layers[0];
        let eye = DenseArray::matrix(
            4,
            4,
            (0..16)
                .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
                .collect(),
        );
        s.get_mut(layer.cross.query.weight).value = eye.clone();
        s.get_mut(layer.cross.key.weight).value = eye;
        let entries =
            DenseArray::matrix(3, 4, vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]);
        let d = VisualDictionary::new(entries.clone(), 0.5).unwrap();
        let wv = s.get(layer.cross.value.weight).value.clone();
        for target in 0..3 {
            let mut g = Graph::new(&s);
            let ctx = prepare_dictionary(&mut g, &stack, &d).unwrap();
            let q = g.constant(DenseArray::matrix(
                1,
                4,
                entries.row(target).iter().map(|x| 100.0 * x).collect(),
            ));
            let out = wfh_cross_attention(&mut g, &layer, q, &ctx).unwrap();
            for o in 0..4 {
                let want: f64 = (0..4).map(|i| wv.get(o, i) * entries.get(target, i)).sum();
                assert!((g.value(out).get(0, o) - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn heads_are_convex_combinations_of_projected_entries() {
        let (s, stack, d) = setup(2, 7, 6);
        let mut g = Graph::new(&s);
        let ctx = prepare_dictionary(&mut g, &stack, &d).unwrap();
        let x = g.constant(input(5));
        let out = hallucinate(
            &mut g,
            &stack,
            &ctx,
            x,
            &[Segment::within(0, 2), Segment::within(2, 3)],
        )
        .unwrap();
        for (j, layer) in stack.layers.iter().enumerate() {
            let node = out.cross_attention[j];
            let probs = g.attention_probs(node).unwrap();
            let values = g.value(ctx.values[j]);
            let width = layer.d_out / layer.cross_heads;
            for m in 0..layer.cross_heads {
                let p = probs.get(0, m);
                for r in 0..5 {
                    let row_sum: f64 = p.row(r).iter().sum();
                    assert!((row_sum - 1.0).abs() < 1e-6);
                    for i in m * width..(m + 1) * width {
                        let want: f64 = (0..7).map(|c| p.get(r, c) * values.get(c, i)).sum();
                        assert!((g.value(node).get(r, i) - want).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_equivariant() {
        let (s, stack, d) = setup(2, 5, 7);
        let x = input(4);
        let a = run(&s, &stack, &d, &x);
        let perm = [2usize, 0, 3, 1];
        let xp =
            DenseArray::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let b = run(&s, &stack, &d, &xp);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..6 {
                assert!((b.get(i, c) - a.get(p, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_arithmetic() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let v = DenseArray::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let same = g.constant(v.clone());
        let l = wfh_loss(&mut g, same, &v).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let off = g.constant(DenseArray::matrix(1, 4, vec![4.0, 6.0, 3.0, 4.0]));
        let l = wfh_loss(&mut g, off, &v).unwrap();
        assert!((g.scalar(l) - 25.0).abs() < 1e-12);
        assert!(wfh_loss(&mut g, off, &DenseArray::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn stack_gradcheck() {
        let (mut s, stack, d) = setup(2, 4, 8);
        let x = input(4);
        let target = DenseArray::matrix(4, 6, (0..24).map(|i| (i as f64 * 0.7).sin()).collect());
        let loss = |p: &ParamStore<f64>| {
            let mut g = Graph::new(p);
            let ctx = prepare_dictionary(&mut g, &stack, &d).unwrap();
            let xv = g.constant(x.clone());
            let out = hallucinate(
                &mut g,
                &stack,
                &ctx,
                xv,
                &[Segment::within(0, 1), Segment::within(1, 3)],
            )
            .unwrap();
            let l = wfh_loss(&mut g, out.output, &target).unwrap();
            (g.scalar(l), g.backward(l))
        };
        let report = check_gradients(&mut s, loss, &GradcheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
