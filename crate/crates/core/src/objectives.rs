//! Masking and the four equally weighted pre-training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SceneSample, WordVocab, MASK};
use crate::encoder::{embed_rows, encoder_forward, s1_rows, s2_rows, EncoderOutput, SequenceBatch};
use crate::error::{Result, WvlpError};
use crate::model::Model;
use crate::nnmath::{DenseArray, Gradients, Graph, Linear, Real, Segment, Targets, Var};
use crate::vocab::VisualDictionary;
use crate::wfh::{hallucinate, prepare_dictionary, wfh_loss, HallucinationOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MocTargets {
    /// Cross-entropy against the detector distribution.
    Soft,
    /// Cross-entropy against the region's true object class.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub mask_prob: f64,
    pub moc_targets: MocTargets,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            moc_targets: MocTargets::Soft,
        }
    }
}

/// A scene with the tag tokens drawn for the current epoch.
#[derive(Clone, Debug)]
pub struct SceneInput<'a> {
    pub scene: &'a SceneSample,
    pub objects: Vec<u32>,
    pub attributes: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct PretrainInputs<'a> {
    pub captions: Vec<&'a [u32]>,
    pub scenes: Vec<SceneInput<'a>>,
}

/// Selected positions per sequence. Selected caption and tag tokens are
/// replaced by the mask token; selected visual features are zeroed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    pub captions: Vec<Vec<bool>>,
    pub tags: Vec<Vec<bool>>,
    pub regions: Vec<Vec<bool>>,
}

/// Bernoulli(`p`) over eligible positions; a stream that draws nothing gets
/// one uniformly chosen eligible position.
fn draw(eligible: &[bool], p: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut m: Vec<bool> = eligible.iter().map(|&e| e && rng.gen_bool(p)).collect();
    if !m.iter().any(|&x| x) {
        let idx: Vec<usize> = (0..eligible.len()).filter(|&i| eligible[i]).collect();
        if !idx.is_empty() {
            m[idx[rng.gen_range(0..idx.len())]] = true;
        }
    }
    m
}

pub fn plan_masks(
    inputs: &PretrainInputs<'_>,
    vocab: &WordVocab,
    p: f64,
    rng: &mut impl Rng,
) -> Result<MaskingPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(WvlpError::Config(format!(
            "mask probability {p} outside [0, 1]"
        )));
    }
    let captions = inputs
        .captions
        .iter()
        .map(|c| {
            let eligible: Vec<bool> = c.iter().map(|&t| !vocab.is_attribute(t)).collect();
            draw(&eligible, p, rng)
        })
        .collect();
    let mut tags = Vec::with_capacity(inputs.scenes.len());
    let mut regions = Vec::with_capacity(inputs.scenes.len());
    for s in &inputs.scenes {
        let eligible = vec![true; s.objects.len()];
        tags.push(draw(&eligible, p, rng));
        regions.push(draw(&eligible, p, rng));
    }
    Ok(MaskingPlan {
        captions,
        tags,
        regions,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub mtc: f64,
    pub moc: f64,
    pub wfh: f64,
    pub total: f64,
}

fn masked_positions(plan: &[bool]) -> impl Iterator<Item = usize> + '_ {
    plan.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
}

fn head_loss<T: Real>(
    g: &mut Graph<'_, T>,
    states: Var,
    rows: &[usize],
    head: &Linear,
    targets: Targets<T>,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(WvlpError::Empty("no masked positions".into()));
    }
    let h = g.rows(states, rows)?;
    let logits = head.forward(g, h)?;
    g.cross_entropy(logits, targets)
}

/// Vocabulary cross-entropy at `rows` of the S1 states.
pub fn mlm_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    states: Var,
    rows: &[usize],
    targets: &[u32],
) -> Result<Var> {
    let t = targets.iter().map(|&x| x as usize).collect();
    head_loss(
        g,
        states,
        rows,
        &model.layout.pretrain.mlm,
        Targets::Classes(t),
    )
}

/// Object-class cross-entropy at masked tag rows of the S2 states.
pub fn mtc_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    states: Var,
    rows: &[usize],
    classes: &[u32],
) -> Result<Var> {
    let t = classes.iter().map(|&x| x as usize).collect();
    head_loss(
        g,
        states,
        rows,
        &model.layout.pretrain.mtc,
        Targets::Classes(t),
    )
}

/// Object-class cross-entropy against (soft or hard) targets at masked region rows.
pub fn moc_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    states: Var,
    rows: &[usize],
    targets: Targets<T>,
) -> Result<Var> {
    head_loss(g, states, rows, &model.layout.pretrain.moc, targets)
}

/// All graph nodes of one pre-training forward, kept for tests and analysis.
#[derive(Clone, Debug)]
pub struct PretrainGraph {
    pub mlm: Var,
    pub mtc: Var,
    pub moc: Var,
    pub wfh: Option<Var>,
    pub total: Var,
    pub s1: SequenceBatch,
    pub s1_out: EncoderOutput,
    pub s2: SequenceBatch,
    pub s2_out: EncoderOutput,
    pub caption_hallucinations: Option<HallucinationOutput>,
    pub tag_hallucinations: Option<HallucinationOutput>,
}

impl PretrainGraph {
    pub fn breakdown<T: Real>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        LossBreakdown {
            mlm: g.scalar(self.mlm).as_f64(),
            mtc: g.scalar(self.mtc).as_f64(),
            moc: g.scalar(self.moc).as_f64(),
            wfh: self.wfh.map_or(0.0, |v| g.scalar(v).as_f64()),
            total: g.scalar(self.total).as_f64(),
        }
    }
}

fn segments_of(lens: impl Iterator<Item = usize>) -> (Vec<Segment>, Vec<usize>) {
    let mut segs = Vec::new();
    let mut offsets = Vec::new();
    let mut at = 0;
    for l in lens {
        segs.push(Segment::within(at, l));
        offsets.push(at);
        at += l;
    }
    (segs, offsets)
}

/// Builds both passes on `g`: captions (with hallucinations) → masked
/// language modeling; tags → hallucination loss; masked scenes → tag and
/// region classification.
pub fn pretrain_forward<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    dict: Option<&VisualDictionary<T>>,
    vocab: &WordVocab,
    inputs: &PretrainInputs<'_>,
    plan: &MaskingPlan,
    cfg: &ObjectiveConfig,
) -> Result<PretrainGraph> {
    let mc = &model.config;
    let ec = &mc.encoder;
    let lay = &model.layout;
    if inputs.captions.is_empty() || inputs.scenes.is_empty() {
        return Err(WvlpError::Empty(
            "pre-training batch needs captions and scenes".into(),
        ));
    }
    if plan.captions.len() != inputs.captions.len() || plan.tags.len() != inputs.scenes.len() {
        return Err(WvlpError::Shape(
            "masking plan does not match the batch".into(),
        ));
    }
    let ctx = match (&lay.wfh, dict) {
        (Some(stack), Some(d)) => Some((stack, prepare_dictionary(g, stack, d)?)),
        (Some(_), None) => {
            return Err(WvlpError::Contract(
                "the hallucinator needs a visual dictionary".into(),
            ))
        }
        (None, _) => None,
    };
    let table = g.param(lay.emb.token);

    // S1: text plus hallucinations of the unmasked caption.
    let (cap_segs, cap_offsets) = segments_of(inputs.captions.iter().map(|c| c.len()));
    let caption_hallucinations = match &ctx {
        Some((stack, ctx)) => {
            let ids: Vec<usize> = inputs
                .captions
                .iter()
                .flat_map(|c| c.iter().map(|&t| t as usize))
                .collect();
            if let Some(&bad) = ids.iter().find(|&&t| t >= ec.vocab_size) {
                return Err(WvlpError::TokenOutOfRange {
                    id: bad,
                    vocab: ec.vocab_size,
                });
            }
            let x = g.rows(table, &ids)?;
            Some(hallucinate(g, stack, ctx, x, &cap_segs)?)
        }
        None => None,
    };
    let mut s1 = SequenceBatch::default();
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    for (i, cap) in inputs.captions.iter().enumerate() {
        let m = &plan.captions[i];
        if m.len() != cap.len() {
            return Err(WvlpError::Shape(format!(
                "caption {i}: plan of {} for {} tokens",
                m.len(),
                cap.len()
            )));
        }
        let masked: Vec<u32> = cap
            .iter()
            .zip(m)
            .map(|(&t, &k)| if k { MASK } else { t })
            .collect();
        let start = s1.len();
        s1.push_sequence(s1_rows(
            &masked,
            caption_hallucinations.as_ref().map(|_| cap_offsets[i]),
        ));
        for l in masked_positions(m) {
            mlm_rows.push(start + 1 + l);
            mlm_targets.push(cap[l]);
        }
    }
    let x1 = embed_rows(
        g,
        &lay.emb,
        ec,
        &s1.rows,
        caption_hallucinations.as_ref().map(|h| h.output),
    )?;
    let s1_out = encoder_forward(g, &lay.encoder, ec, x1, &s1)?;
    let mlm = mlm_loss(g, model, s1_out.states, &mlm_rows, &mlm_targets)?;

    // Tags: hallucination loss against the detector features.
    let n_obj = mc.n_objects;
    let d_v = ec.d_v;
    let mut features = Vec::new();
    for s in &inputs.scenes {
        if s.objects.len() != s.scene.n_regions() || s.attributes.len() != s.scene.n_regions() {
            return Err(WvlpError::Shape(format!(
                "scene {}: tags do not match regions",
                s.scene.id
            )));
        }
        for r in &s.scene.regions {
            if r.feature.len() != d_v {
                return Err(WvlpError::Shape(format!(
                    "region feature of width {} for d_v = {d_v}",
                    r.feature.len()
                )));
            }
            features.extend(r.feature.iter().map(|&x| T::of(x as f64)));
        }
    }
    let n_regions: usize = inputs.scenes.iter().map(|s| s.scene.n_regions()).sum();
    let features = DenseArray::matrix(n_regions, d_v, features);
    let (tag_segs, region_offsets) = segments_of(inputs.scenes.iter().map(|s| s.scene.n_regions()));
    let tag_hallucinations = match &ctx {
        Some((stack, ctx)) => {
            let objs: Vec<usize> = inputs
                .scenes
                .iter()
                .flat_map(|s| s.objects.iter().map(|&o| o as usize))
                .collect();
            let mut x = g.rows(table, &objs)?;
            if mc.attributes {
                let attrs: Vec<usize> = inputs
                    .scenes
                    .iter()
                    .flat_map(|s| s.attributes.iter().map(|&a| a as usize))
                    .collect();
                let a = g.rows(table, &attrs)?;
                x = g.add(x, a)?;
            }
            Some(hallucinate(g, stack, ctx, x, &tag_segs)?)
        }
        None => None,
    };
    let wfh = match &tag_hallucinations {
        Some(h) => Some(wfh_loss(g, h.output, &features)?),
        None => None,
    };

    // S2: masked regions (zeroed) and masked tags.
    let mut visual = features;
    let mut s2 = SequenceBatch::default();
    let (mut mtc_rows, mut mtc_targets) = (Vec::new(), Vec::new());
    let (mut moc_rows, mut moc_soft, mut moc_hard) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in inputs.scenes.iter().enumerate() {
        let b = s.scene.n_regions();
        let (tm, rm) = (&plan.tags[i], &plan.regions[i]);
        if tm.len() != b || rm.len() != b {
            return Err(WvlpError::Shape(format!(
                "scene {i}: plan does not match {b} regions"
            )));
        }
        let geometry: Vec<_> = s.scene.regions.iter().map(|r| r.geometry).collect();
        let objects: Vec<u32> = s
            .objects
            .iter()
            .zip(tm)
            .map(|(&o, &k)| if k { MASK } else { o })
            .collect();
        let start = s2.len();
        s2.push_sequence(s2_rows(
            region_offsets[i],
            &geometry,
            &objects,
            mc.attributes.then_some(s.attributes.as_slice()),
        )?);
        for bi in masked_positions(rm) {
            visual
                .row_mut(region_offsets[i] + bi)
                .iter_mut()
                .for_each(|x| *x = T::zero());
            moc_rows.push(start + 1 + bi);
            if s.scene.p_obj[bi].len() != n_obj {
                return Err(WvlpError::Shape(format!(
                    "detector distribution over {} classes",
                    s.scene.p_obj[bi].len()
                )));
            }
            moc_soft.extend(s.scene.p_obj[bi].iter().map(|&p| T::of(p as f64)));
            moc_hard.push(s.scene.regions[bi].object as usize);
        }
        for bi in masked_positions(tm) {
            mtc_rows.push(start + 1 + b + bi);
            let class = vocab.object_class(s.objects[bi]).ok_or_else(|| {
                WvlpError::Contract(format!("tag token {} is not an object", s.objects[bi]))
            })?;
            mtc_targets.push(class as u32);
        }
    }
    let visual = g.constant(visual);
    let x2 = embed_rows(g, &lay.emb, ec, &s2.rows, Some(visual))?;
    let s2_out = encoder_forward(g, &lay.encoder, ec, x2, &s2)?;
    let mtc = mtc_loss(g, model, s2_out.states, &mtc_rows, &mtc_targets)?;
    let moc_targets = match cfg.moc_targets {
        MocTargets::Soft => Targets::Soft(DenseArray::matrix(moc_rows.len(), n_obj, moc_soft)),
        MocTargets::Hard => Targets::Classes(moc_hard),
    };
    let moc = moc_loss(g, model, s2_out.states, &moc_rows, moc_targets)?;

    let mut terms = vec![mlm, mtc, moc];
    terms.extend(wfh);
    let total = g.sum(&terms)?;
    Ok(PretrainGraph {
        mlm,
        mtc,
        moc,
        wfh,
        total,
        s1,
        s1_out,
        s2,
        s2_out,
        caption_hallucinations,
        tag_hallucinations,
    })
}

/// One forward and one backward over the summed loss.
pub fn pretrain_step<T: Real>(
    model: &Model<T>,
    dict: Option<&VisualDictionary<T>>,
    vocab: &WordVocab,
    inputs: &PretrainInputs<'_>,
    plan: &MaskingPlan,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let mut g = Graph::new(&model.params);
    let out = pretrain_forward(&mut g, model, dict, vocab, inputs, plan, cfg)?;
    let grads = g.backward(out.total);
    Ok((out.breakdown(&g), grads))
}

pub const LOSS_CSV_HEADER: &str = "step,mlm,mtc,moc,wfh,total,lr";

pub fn loss_csv_row(step: usize, l: &LossBreakdown, lr: f64) -> String {
    format!(
        "{step},{},{},{},{},{},{lr}",
        l.mlm, l.mtc, l.moc, l.wfh, l.total
    )
}
