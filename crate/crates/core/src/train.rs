//! Optimizer, learning-rate schedule and the deterministic pre-training loop.

use serde::{Deserialize, Serialize};

use crate::corpus::{derived_rng, make_batches, Batch, Corpus, SplitKind};
use crate::error::{Result, WvlpError};
use crate::model::{Model, TensorFile};
use crate::nnmath::{DenseArray, Gradients, ParamStore, Real};
use crate::objectives::{
    plan_masks, pretrain_step, LossBreakdown, ObjectiveConfig, PretrainInputs, SceneInput,
};
use crate::vocab::VisualDictionary;

const TAG_STREAM: u64 = 17;
const MASK_STREAM: u64 = 19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: bool,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_frac: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: true,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub total: usize,
    pub warmup_frac: f64,
    pub peak: f64,
}

/// Linear ramp from 0 to `peak` over the warmup fraction, then linear decay
/// to 0 at `total`.
pub fn lr_at(step: usize, s: &LrSchedule) -> Result<f64> {
    if step > s.total {
        return Err(WvlpError::Contract(format!(
            "step {step} beyond schedule end {}",
            s.total
        )));
    }
    let (t, w) = (step as f64, s.warmup_frac * s.total as f64);
    if t < w {
        Ok(s.peak * t / w)
    } else if s.total as f64 == w {
        Ok(s.peak)
    } else {
        Ok(s.peak * (s.total as f64 - t) / (s.total as f64 - w))
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.scale(s);
    }
    norm
}

pub fn check_finite<T: Real>(params: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    for (id, p) in params.iter() {
        if let Some(g) = grads.get(id) {
            if !g.is_finite() {
                return Err(WvlpError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub m: Vec<Option<DenseArray<T>>>,
    pub v: Vec<Option<DenseArray<T>>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: OptimConfig, params: &ParamStore<T>) -> Self {
        Self {
            cfg,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
            t: 0,
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        check_finite(params, grads)?;
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let n = p.value.len();
            let m = self.m[id.0].get_or_insert_with(|| DenseArray::zeros(p.value.shape()));
            let v = self.v[id.0].get_or_insert_with(|| DenseArray::zeros(p.value.shape()));
            let (x, m, v, g) = (
                p.value.values_mut(),
                m.values_mut(),
                v.values_mut(),
                g.values(),
            );
            for i in 0..n {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                x[i] = x[i] * decay - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_file(&self, params: &ParamStore<T>) -> TensorFile {
        let mut tensors = Vec::new();
        for (id, p) in params.iter() {
            if let (Some(m), Some(v)) = (&self.m[id.0], &self.v[id.0]) {
                tensors.push((format!("m.{}", p.name), m.cast()));
                tensors.push((format!("v.{}", p.name), v.cast()));
            }
        }
        TensorFile {
            text: format!("step {}", self.t),
            tensors,
        }
    }

    pub fn from_file(cfg: OptimConfig, params: &ParamStore<T>, file: &TensorFile) -> Result<Self> {
        let mut s = Self::new(cfg, params);
        s.t = file
            .text
            .strip_prefix("step ")
            .and_then(|x| x.trim().parse().ok())
            .ok_or_else(|| WvlpError::Contract("optimizer state without a step count".into()))?;
        for (name, value) in &file.tensors {
            let (slot, pname) = if let Some(n) = name.strip_prefix("m.") {
                (&mut s.m, n)
            } else if let Some(n) = name.strip_prefix("v.") {
                (&mut s.v, n)
            } else {
                return Err(WvlpError::Contract(format!(
                    "unexpected optimizer tensor {name}"
                )));
            };
            let id = params.id(pname).ok_or_else(|| {
                WvlpError::Contract(format!("optimizer tensor for unknown parameter {pname}"))
            })?;
            if params.get(id).value.shape() != value.shape() {
                return Err(WvlpError::Shape(format!(
                    "optimizer tensor {name} has shape {:?}",
                    value.shape()
                )));
            }
            slot[id.0] = Some(value.cast());
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            optim: OptimConfig::default(),
            checkpoint_every: 0,
        }
    }
}

/// Everything a pre-training step needs besides the model and optimizer.
pub struct PretrainContext<'a> {
    pub corpus: &'a Corpus,
    pub dict: Option<&'a VisualDictionary<f32>>,
    pub objectives: &'a ObjectiveConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

/// Runs updates `start..end` (0-based); batch, tags and masks of update `s`
/// depend only on `(seed, s)`, so a resumed run repeats an unbroken one.
pub fn pretrain_steps(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    ctx: &PretrainContext<'_>,
    start: usize,
    end: usize,
    mut on_step: impl FnMut(&StepRecord, &Model<f32>, &AdamW<f32>) -> Result<()>,
) -> Result<()> {
    if model.config.hallucinator && ctx.dict.is_none() {
        return Err(WvlpError::Contract(
            "the hallucinator needs a visual dictionary".into(),
        ));
    }
    let split = ctx.corpus.split(SplitKind::Pretrain)?;
    let stream = make_batches(split, ctx.train.batch_size, false, ctx.seed)?;
    let schedule = LrSchedule {
        total: ctx.train.steps,
        warmup_frac: ctx.train.optim.warmup_frac,
        peak: ctx.train.optim.lr,
    };
    let vocab = &ctx.corpus.world.vocab;
    for s in start..end {
        let Batch::Unpaired(batch) = stream.batch_at(s) else {
            return Err(WvlpError::Contract(
                "pre-training requires unpaired batches".into(),
            ));
        };
        let scenes = batch
            .scenes
            .iter()
            .zip(&batch.scene_epochs)
            .map(|(&scene, &epoch)| {
                let mut rng = derived_rng(ctx.seed, &[TAG_STREAM, epoch as u64, scene.id as u64]);
                let (objects, attributes) = scene.resample_tags(&ctx.corpus.world, &mut rng);
                SceneInput {
                    scene,
                    objects,
                    attributes,
                }
            })
            .collect();
        let inputs = PretrainInputs {
            captions: batch.captions,
            scenes,
        };
        let plan = plan_masks(
            &inputs,
            vocab,
            ctx.objectives.mask_prob,
            &mut derived_rng(ctx.seed, &[MASK_STREAM, s as u64]),
        )?;
        let (losses, mut grads) =
            pretrain_step(model, ctx.dict, vocab, &inputs, &plan, ctx.objectives)?;
        check_finite(&model.params, &grads)?;
        if ctx.train.optim.clip {
            clip_global_norm(&mut grads, ctx.train.optim.clip_norm);
        }
        let lr = lr_at(s + 1, &schedule)?;
        opt.step(&mut model.params, &grads, lr)?;
        on_step(
            &StepRecord {
                step: s + 1,
                losses,
                lr,
            },
            model,
            opt,
        )?;
    }
    Ok(())
}
