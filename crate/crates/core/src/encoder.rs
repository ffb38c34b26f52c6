//! Input embeddings and the single-stream post-LN transformer.
//!
//! All sequences of a batch are stacked row-wise into one `[rows, d_model]`
//! matrix; attention is restricted to each sequence through [`Segment`]s.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Geometry, CLS};
use crate::error::{Result, WvlpError};
use crate::nnmath::{
    DenseArray, Graph, LayerNorm, Linear, ParamId, ParamStore, Real, Segment, Var,
};

/// Init scale of the embedding tables and positional maps.
pub const EMBEDDING_STD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_v: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_regions: usize,
    pub d_ff: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(WvlpError::Config(format!(
                "d_model = {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 || self.n_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(WvlpError::Config(
                "encoder dimensions must be positive (d_model ≥ 2)".into(),
            ));
        }
        Ok(())
    }

    /// Longest sequence any builder produces: start + two halves.
    pub fn max_seq_len(&self) -> usize {
        1 + 2 * self.max_text_len.max(self.max_regions)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text = 0,
    Visual = 1,
}

/// Role of a row, used by pooling, masking losses and the attention analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionKind {
    Start,
    Caption(usize),
    Hallucination(usize),
    Region(usize),
    Tag(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Content {
    Token(u32),
    /// `emb(object) + emb(attribute)`; the attribute summand is optional.
    Tag {
        object: u32,
        attribute: Option<u32>,
    },
    /// Row `i` of the visual matrix, passed through `f`.
    Visual(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowPosition {
    None,
    Text(usize),
    Box(Geometry),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowSpec {
    pub content: Content,
    pub position: RowPosition,
    pub modality: Modality,
    pub kind: PositionKind,
}

/// Row layout of a stacked batch of sequences.
#[derive(Clone, Debug, Default)]
pub struct SequenceBatch {
    pub rows: Vec<RowSpec>,
    /// `(start, len)` of each sequence.
    pub sequences: Vec<(usize, usize)>,
}

impl SequenceBatch {
    pub fn push_sequence(&mut self, rows: impl IntoIterator<Item = RowSpec>) {
        let start = self.rows.len();
        self.rows.extend(rows);
        self.sequences.push((start, self.rows.len() - start));
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.sequences
            .iter()
            .map(|&(s, l)| Segment::within(s, l))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Absolute row indices of sequence `seq` whose kind satisfies `pred`.
    pub fn rows_where(&self, seq: usize, pred: impl Fn(PositionKind) -> bool) -> Vec<usize> {
        let (s, l) = self.sequences[seq];
        (s..s + l).filter(|&r| pred(self.rows[r].kind)).collect()
    }
}

pub fn start_row() -> RowSpec {
    RowSpec {
        content: Content::Token(CLS),
        position: RowPosition::None,
        modality: Modality::Text,
        kind: PositionKind::Start,
    }
}

pub fn text_row(token: u32, l: usize) -> RowSpec {
    RowSpec {
        content: Content::Token(token),
        position: RowPosition::Text(l),
        modality: Modality::Text,
        kind: PositionKind::Caption(l),
    }
}

pub fn hallucination_row(visual_index: usize, l: usize) -> RowSpec {
    RowSpec {
        content: Content::Visual(visual_index),
        position: RowPosition::Text(l),
        modality: Modality::Visual,
        kind: PositionKind::Hallucination(l),
    }
}

pub fn region_row(visual_index: usize, geometry: Geometry, b: usize) -> RowSpec {
    RowSpec {
        content: Content::Visual(visual_index),
        position: RowPosition::Box(geometry),
        modality: Modality::Visual,
        kind: PositionKind::Region(b),
    }
}

pub fn tag_row(object: u32, attribute: Option<u32>, geometry: Geometry, b: usize) -> RowSpec {
    RowSpec {
        content: Content::Tag { object, attribute },
        position: RowPosition::Box(geometry),
        modality: Modality::Text,
        kind: PositionKind::Tag(b),
    }
}

/// `[start] + L text rows + L hallucination rows`; hallucination `l` is row
/// `visual_offset + l` of the visual matrix.
pub fn s1_rows(tokens: &[u32], visual_offset: Option<usize>) -> Vec<RowSpec> {
    let mut rows = vec![start_row()];
    rows.extend(tokens.iter().enumerate().map(|(l, &t)| text_row(t, l)));
    if let Some(off) = visual_offset {
        rows.extend((0..tokens.len()).map(|l| hallucination_row(off + l, l)));
    }
    rows
}

/// `[start] + B region rows + B tag rows`.
pub fn s2_rows(
    visual_offset: usize,
    geometry: &[Geometry],
    objects: &[u32],
    attributes: Option<&[u32]>,
) -> Result<Vec<RowSpec>> {
    let b = geometry.len();
    if objects.len() != b || attributes.is_some_and(|a| a.len() != b) {
        return Err(WvlpError::Shape(format!(
            "{} object tags, {:?} attribute tags for {b} regions",
            objects.len(),
            attributes.map(|a| a.len())
        )));
    }
    let mut rows = vec![start_row()];
    rows.extend((0..b).map(|i| region_row(visual_offset + i, geometry[i], i)));
    rows.extend((0..b).map(|i| tag_row(objects[i], attributes.map(|a| a[i]), geometry[i], i)));
    Ok(rows)
}

/// Fine-tuning input: `[start] + caption text rows + region rows`.
pub fn joint_rows(tokens: &[u32], visual_offset: usize, geometry: &[Geometry]) -> Vec<RowSpec> {
    let mut rows = vec![start_row()];
    rows.extend(tokens.iter().enumerate().map(|(l, &t)| text_row(t, l)));
    rows.extend(
        geometry
            .iter()
            .enumerate()
            .map(|(b, &g)| region_row(visual_offset + b, g, b)),
    );
    rows
}

#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    pub token: ParamId,
    pub pos_text: Linear,
    pub pos_image: Linear,
    pub modality: ParamId,
    pub f: Linear,
}

impl Embeddings {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let token = store.add_normal("emb.token", cfg.vocab_size, d, EMBEDDING_STD, rng)?;
        let pos_text = Linear {
            weight: store.add_normal("emb.pos_text.weight", d, 1, EMBEDDING_STD, rng)?,
            bias: Some(store.add_const("emb.pos_text.bias", 1, d, 0.0)?),
        };
        let pos_image = Linear {
            weight: store.add_normal("emb.pos_image.weight", d, 4, EMBEDDING_STD, rng)?,
            bias: Some(store.add_const("emb.pos_image.bias", 1, d, 0.0)?),
        };
        let modality = store.add_normal("emb.modality", 2, d, EMBEDDING_STD, rng)?;
        let f = Linear::new(store, "emb.f", cfg.d_v, d, true, rng)?;
        Ok(Self {
            token,
            pos_text,
            pos_image,
            modality,
            f,
        })
    }
}

/// Gathers rows of `src` by `idx`, where `None` yields a zero row.
fn scatter<T: Real>(g: &mut Graph<'_, T>, src: Var, idx: &[Option<usize>]) -> Result<Var> {
    let (n, d) = (g.value(src).rows(), g.value(src).cols());
    if idx.iter().all(|i| i.is_some()) {
        let plain: Vec<usize> = idx.iter().map(|i| i.unwrap()).collect();
        return g.rows(src, &plain);
    }
    let zero = g.constant(DenseArray::zeros(&[1, d]));
    let ext = g.concat_rows(&[src, zero])?;
    let plain: Vec<usize> = idx.iter().map(|i| i.unwrap_or(n)).collect();
    g.rows(ext, &plain)
}

/// Sums the content, positional and modality terms of every row.
pub fn embed_rows<T: Real>(
    g: &mut Graph<'_, T>,
    emb: &Embeddings,
    cfg: &EncoderConfig,
    rows: &[RowSpec],
    visual: Option<Var>,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(WvlpError::Empty("no rows to embed".into()));
    }
    let v = cfg.vocab_size;
    let check = |t: u32| {
        if (t as usize) < v {
            Ok(t as usize)
        } else {
            Err(WvlpError::TokenOutOfRange {
                id: t as usize,
                vocab: v,
            })
        }
    };
    let mut primary = Vec::with_capacity(rows.len());
    let mut secondary = Vec::with_capacity(rows.len());
    let mut vis = Vec::with_capacity(rows.len());
    let mut text_pos = Vec::new();
    let mut text_idx = Vec::with_capacity(rows.len());
    let mut boxes = Vec::new();
    let mut box_idx = Vec::with_capacity(rows.len());
    let mut types = Vec::with_capacity(rows.len());
    for r in rows {
        match r.content {
            Content::Token(t) => {
                primary.push(Some(check(t)?));
                secondary.push(None);
                vis.push(None);
            }
            Content::Tag { object, attribute } => {
                primary.push(Some(check(object)?));
                secondary.push(attribute.map(check).transpose()?);
                vis.push(None);
            }
            Content::Visual(i) => {
                primary.push(None);
                secondary.push(None);
                vis.push(Some(i));
            }
        }
        match r.position {
            RowPosition::None => {
                text_idx.push(None);
                box_idx.push(None);
            }
            RowPosition::Text(l) => {
                text_idx.push(Some(text_pos.len()));
                text_pos.push(T::of(l as f64 / cfg.max_text_len as f64));
                box_idx.push(None);
            }
            RowPosition::Box(geom) => {
                text_idx.push(None);
                box_idx.push(Some(boxes.len() / 4));
                boxes.extend(geom.iter().map(|&x| T::of(x as f64)));
            }
        }
        types.push(r.modality as usize);
    }

    let mut terms = Vec::new();
    let table = g.param(emb.token);
    if primary.iter().any(Option::is_some) {
        terms.push(scatter(g, table, &primary)?);
    }
    if secondary.iter().any(Option::is_some) {
        terms.push(scatter(g, table, &secondary)?);
    }
    if vis.iter().any(Option::is_some) {
        let visual = visual
            .ok_or_else(|| WvlpError::Contract("visual rows without a visual matrix".into()))?;
        let n_vis = g.value(visual).rows();
        if let Some(bad) = vis.iter().flatten().find(|&&i| i >= n_vis) {
            return Err(WvlpError::Shape(format!("visual row {bad} of {n_vis}")));
        }
        let projected = project_visual_raw(g, emb, visual)?;
        terms.push(scatter(g, projected, &vis)?);
    }
    if !text_pos.is_empty() {
        let n = text_pos.len();
        let col = g.constant(DenseArray::matrix(n, 1, text_pos));
        let p = emb.pos_text.forward(g, col)?;
        terms.push(scatter(g, p, &text_idx)?);
    }
    if !boxes.is_empty() {
        let n = boxes.len() / 4;
        let geo = g.constant(DenseArray::matrix(n, 4, boxes));
        let p = emb.pos_image.forward(g, geo)?;
        terms.push(scatter(g, p, &box_idx)?);
    }
    let type_table = g.param(emb.modality);
    terms.push(g.rows(type_table, &types)?);
    g.sum(&terms)
}

/// `f(v) = W_f v + b_f`, the projection shared by real and hallucinated features.
pub fn project_visual_raw<T: Real>(g: &mut Graph<'_, T>, emb: &Embeddings, v: Var) -> Result<Var> {
    emb.f.forward(g, v).map_err(|_| {
        WvlpError::Shape(format!(
            "visual features of width {} against f expecting {}",
            g.value(v).cols(),
            g.params().get(emb.f.weight).value.cols()
        ))
    })
}

/// Token rows + `p^W(l)` + text type, for a single caption.
pub fn embed_text<T: Real>(
    g: &mut Graph<'_, T>,
    emb: &Embeddings,
    cfg: &EncoderConfig,
    tokens: &[u32],
) -> Result<Var> {
    let rows: Vec<RowSpec> = tokens
        .iter()
        .enumerate()
        .map(|(l, &t)| text_row(t, l))
        .collect();
    embed_rows(g, emb, cfg, &rows, None)
}

/// `emb(o_b) + emb(a_b) + p^I(geometry_b) + type(text)`; `attributes: None`
/// drops the attribute summand.
pub fn fuse_tags<T: Real>(
    g: &mut Graph<'_, T>,
    emb: &Embeddings,
    cfg: &EncoderConfig,
    objects: &[u32],
    attributes: Option<&[u32]>,
    geometry: &[Geometry],
) -> Result<Var> {
    if objects.len() != geometry.len() || attributes.is_some_and(|a| a.len() != objects.len()) {
        return Err(WvlpError::Shape(format!(
            "tag fusion with {} objects, {:?} attributes, {} boxes",
            objects.len(),
            attributes.map(|a| a.len()),
            geometry.len()
        )));
    }
    let rows: Vec<RowSpec> = (0..objects.len())
        .map(|b| tag_row(objects[b], attributes.map(|a| a[b]), geometry[b], b))
        .collect();
    embed_rows(g, emb, cfg, &rows, None)
}

/// `f(v_b) + p^I(geometry_b) + type(visual)`.
pub fn project_visual<T: Real>(
    g: &mut Graph<'_, T>,
    emb: &Embeddings,
    cfg: &EncoderConfig,
    v: Var,
    geometry: &[Geometry],
) -> Result<Var> {
    if g.value(v).rows() != geometry.len() {
        return Err(WvlpError::Shape(format!(
            "{} visual rows for {} boxes",
            g.value(v).rows(),
            geometry.len()
        )));
    }
    let rows: Vec<RowSpec> = geometry
        .iter()
        .enumerate()
        .map(|(b, &gm)| region_row(b, gm, b))
        .collect();
    embed_rows(g, emb, cfg, &rows, Some(v))
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub proj: crate::nnmath::AttentionProjections,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionBlock,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub n_heads: usize,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("enc.{i}");
            layers.push(EncoderLayer {
                attn: AttentionBlock {
                    proj: crate::nnmath::AttentionProjections {
                        query: Linear::new(store, &format!("{p}.attn.query"), d, d, true, rng)?,
                        key: Linear::new(store, &format!("{p}.attn.key"), d, d, true, rng)?,
                        value: Linear::new(store, &format!("{p}.attn.value"), d, d, true, rng)?,
                    },
                    output: Linear::new(store, &format!("{p}.attn.output"), d, d, true, rng)?,
                },
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                ff1: Linear::new(store, &format!("{p}.ff1"), d, cfg.d_ff, true, rng)?,
                ff2: Linear::new(store, &format!("{p}.ff2"), cfg.d_ff, d, true, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
            });
        }
        Ok(Self {
            layers,
            n_heads: cfg.n_heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[rows, d_model]` contextual states.
    pub states: Var,
    /// Fused attention node of every layer; read with [`Graph::attention_probs`].
    pub attention: Vec<Var>,
}

/// Runs every layer over the stacked, already embedded sequences.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<'_, T>,
    enc: &Encoder,
    cfg: &EncoderConfig,
    x: Var,
    batch: &SequenceBatch,
) -> Result<EncoderOutput> {
    let max = cfg.max_seq_len();
    if let Some(&(_, len)) = batch.sequences.iter().find(|&&(_, l)| l > max) {
        return Err(WvlpError::Contract(format!(
            "sequence of length {len} exceeds the maximum of {max}"
        )));
    }
    if g.value(x).rows() != batch.len() {
        return Err(WvlpError::Shape(format!(
            "{} embedded rows for a layout of {}",
            g.value(x).rows(),
            batch.len()
        )));
    }
    let segments = batch.segments();
    let mut h = x;
    let mut attention = Vec::with_capacity(enc.layers.len());
    for layer in &enc.layers {
        let p = &layer.attn.proj;
        let (q, k, v) = (
            p.query.forward(g, h)?,
            p.key.forward(g, h)?,
            p.value.forward(g, h)?,
        );
        let a = g.attention(q, k, v, enc.n_heads, &segments)?;
        attention.push(a);
        let o = layer.attn.output.forward(g, a)?;
        let r = g.add(h, o)?;
        let h1 = layer.ln1.forward(g, r)?;
        let f = layer.ff1.forward(g, h1)?;
        let f = g.gelu(f);
        let f = layer.ff2.forward(g, f)?;
        let r = g.add(h1, f)?;
        h = layer.ln2.forward(g, r)?;
    }
    Ok(EncoderOutput {
        states: h,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmath::gradcheck::{check_gradients, GradcheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_v: 8,
            vocab_size: 12,
            max_text_len: 6,
            max_regions: 4,
            d_ff: 12,
        }
    }

    fn build(seed: u64) -> (ParamStore<f64>, Embeddings, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cfg = tiny();
        let emb = Embeddings::new(&mut s, &cfg, &mut rng).unwrap();
        let enc = Encoder::new(&mut s, &cfg, &mut rng).unwrap();
        (s, emb, enc)
    }

    #[test]
    fn text_embedding_decomposes() {
        let (s, emb, _) = build(1);
        let cfg = tiny();
        let mut g = Graph::new(&s);
        let x = embed_text(&mut g, &emb, &cfg, &[5, 5, 7]).unwrap();
        let x = g.value(x).clone();
        let table = &s.get(emb.token).value;
        let types = &s.get(emb.modality).value;
        let pw0 = s.get(emb.pos_text.bias.unwrap()).value.values().to_vec();
        for j in 0..8 {
            let want = table.get(5, j) + pw0[j] + types.get(0, j);
            assert!((x.get(0, j) - want).abs() < 1e-12);
        }
        let mut g2 = Graph::new(&s);
        let y = embed_text(&mut g2, &emb, &cfg, &[5, 5, 7]).unwrap();
        assert_eq!(g2.value(y), &x);
        let mut g3 = Graph::new(&s);
        assert!(matches!(
            embed_text(&mut g3, &emb, &cfg, &[12]),
            Err(WvlpError::TokenOutOfRange { id: 12, vocab: 12 })
        ));
    }

    #[test]
    fn tag_fusion_additivity() {
        let (mut s, emb, _) = build(2);
        let cfg = tiny();
        let geo = [[0.1, 0.2, 0.3, 0.4f32]];
        let mut g = Graph::new(&s);
        let both = fuse_tags(&mut g, &emb, &cfg, &[4], Some(&[4]), &geo).unwrap();
        let only = fuse_tags(&mut g, &emb, &cfg, &[4], None, &geo).unwrap();
        let (both, only) = (g.value(both).clone(), g.value(only).clone());
        let row = s.get(emb.token).value.row(4).to_vec();
        for j in 0..8 {
            assert!((both.get(0, j) - only.get(0, j) - row[j]).abs() < 1e-12);
        }
        // a zero attribute embedding contributes nothing
        s.get_mut(emb.token)
            .value
            .row_mut(9)
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut g = Graph::new(&s);
        let zero_attr = fuse_tags(&mut g, &emb, &cfg, &[4], Some(&[9]), &geo).unwrap();
        let obj_only = fuse_tags(&mut g, &emb, &cfg, &[4], None, &geo).unwrap();
        assert_eq!(g.value(zero_attr), g.value(obj_only));
        let mut g = Graph::new(&s);
        assert!(fuse_tags(&mut g, &emb, &cfg, &[4, 5], None, &geo).is_err());
    }

    #[test]
    fn visual_projection_zero_and_linear() {
        let (mut s, emb, _) = build(3);
        let cfg = tiny();
        let v = DenseArray::matrix(2, 8, (0..16).map(|i| i as f64 * 0.1 - 0.4).collect());
        s.get_mut(emb.f.bias.unwrap())
            .value
            .values_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut g = Graph::new(&s);
        let a = g.constant(v.clone());
        let fa = project_visual_raw(&mut g, &emb, a).unwrap();
        let b = g.constant(v.map(|x| 2.5 * x));
        let fb = project_visual_raw(&mut g, &emb, b).unwrap();
        let (fa, fb) = (g.value(fa).clone(), g.value(fb).clone());
        assert!(fa.map(|x| 2.5 * x).max_abs_diff(&fb) < 1e-12);
        s.get_mut(emb.f.weight)
            .value
            .values_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut g = Graph::new(&s);
        let a = g.constant(v);
        let z = project_visual_raw(&mut g, &emb, a).unwrap();
        assert!(g.value(z).values().iter().all(|&x| x == 0.0));
        let bad = g.constant(DenseArray::zeros(&[1, 5]));
        assert!(project_visual(&mut g, &emb, &cfg, bad, &[[0.0; 4]]).is_err());
    }

    #[test]
    fn sequence_layouts() {
        let s1 = s1_rows(&[3, 4, 5], Some(0));
        assert_eq!(s1.len(), 7);
        for l in 0..3 {
            assert_eq!(s1[1 + l].position, s1[4 + l].position);
        }
        let geo = vec![[0.0f32; 4]; 8];
        let s2 = s2_rows(0, &geo, &[3; 8], Some(&[5; 8])).unwrap();
        assert_eq!(s2.len(), 17);
        assert!(s2_rows(0, &geo, &[3; 7], None).is_err());
    }

    #[test]
    fn single_position_attention_is_one() {
        let (s, emb, enc) = build(4);
        let cfg = tiny();
        let mut batch = SequenceBatch::default();
        batch.push_sequence([start_row()]);
        let mut g = Graph::new(&s);
        let x = embed_rows(&mut g, &emb, &cfg, &batch.rows, None).unwrap();
        let out = encoder_forward(&mut g, &enc, &cfg, x, &batch).unwrap();
        for &a in &out.attention {
            let p = g.attention_probs(a).unwrap();
            for m in 0..2 {
                assert_eq!(p.get(0, m).values(), &[1.0]);
            }
        }
    }

    #[test]
    fn overlong_sequence_rejected() {
        let (s, emb, enc) = build(5);
        let cfg = tiny();
        let mut batch = SequenceBatch::default();
        let toks: Vec<u32> = vec![3; 7];
        batch.push_sequence(s1_rows(&toks, None));
        batch.push_sequence(toks.iter().enumerate().map(|(l, &t)| text_row(t, l.min(5))));
        let rows: Vec<RowSpec> = (0..14).map(|_| start_row()).collect();
        batch.push_sequence(rows);
        let mut g = Graph::new(&s);
        let x = embed_rows(&mut g, &emb, &cfg, &batch.rows, None).unwrap();
        assert!(matches!(
            encoder_forward(&mut g, &enc, &cfg, x, &batch),
            Err(WvlpError::Contract(_))
        ));
    }

    #[test]
    fn permuting_embedded_rows_permutes_outputs() {
        let (s, emb, enc) = build(6);
        let cfg = tiny();
        let rows = s1_rows(&[3, 4, 5, 6], None);
        let mut a = SequenceBatch::default();
        a.push_sequence(rows.clone());
        let mut g = Graph::new(&s);
        let x = embed_rows(&mut g, &emb, &cfg, &a.rows, None).unwrap();
        let out = encoder_forward(&mut g, &enc, &cfg, x, &a).unwrap();
        let perm = [0usize, 3, 2, 1, 4];
        let xp = g.rows(x, &perm).unwrap();
        let outp = encoder_forward(&mut g, &enc, &cfg, xp, &a).unwrap();
        let (o, op) = (g.value(out.states).clone(), g.value(outp.states).clone());
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((op.get(i, j) - o.get(src, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_sequences_do_not_interact() {
        let (s, emb, enc) = build(7);
        let cfg = tiny();
        let mut both = SequenceBatch::default();
        both.push_sequence(s1_rows(&[3, 4], None));
        both.push_sequence(s1_rows(&[5, 6, 7], None));
        let mut alone = SequenceBatch::default();
        alone.push_sequence(s1_rows(&[3, 4], None));
        let mut g = Graph::new(&s);
        let x = embed_rows(&mut g, &emb, &cfg, &both.rows, None).unwrap();
        let ob = encoder_forward(&mut g, &enc, &cfg, x, &both).unwrap();
        let y = embed_rows(&mut g, &emb, &cfg, &alone.rows, None).unwrap();
        let oa = encoder_forward(&mut g, &enc, &cfg, y, &alone).unwrap();
        for r in 0..3 {
            for j in 0..8 {
                assert!(
                    (g.value(ob.states).get(r, j) - g.value(oa.states).get(r, j)).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn encoder_gradcheck() {
        let (mut s, emb, enc) = build(8);
        let cfg = tiny();
        let mut batch = SequenceBatch::default();
        let geo = [[0.1f32, 0.2, 0.3, 0.2], [0.5, 0.4, 0.2, 0.1]];
        batch.push_sequence(s1_rows(&[3, 4], Some(0)));
        batch.push_sequence(s2_rows(2, &geo, &[5, 6], Some(&[9, 10])).unwrap());
        let visual = DenseArray::matrix(
            4,
            8,
            (0..32).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect(),
        );
        let target = DenseArray::matrix(
            batch.len(),
            8,
            (0..batch.len() * 8).map(|i| (i as f64).cos()).collect(),
        );
        let loss = |p: &ParamStore<f64>| {
            let mut g = Graph::new(p);
            let v = g.constant(visual.clone());
            let x = embed_rows(&mut g, &emb, &cfg, &batch.rows, Some(v)).unwrap();
            let out = encoder_forward(&mut g, &enc, &cfg, x, &batch).unwrap();
            let l = g.squared_error(out.states, target.clone()).unwrap();
            (g.scalar(l), g.backward(l))
        };
        let report = check_gradients(&mut s, loss, &GradcheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
