use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::world::ConceptWorld;
use crate::error::{Result, WvlpError};

/// Box as `(x, y, w, h)`, all in `[0, 1]` with the box inside the unit square.
pub type Geometry = [f32; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub object: u32,
    pub attribute: u32,
    pub feature: Vec<f32>,
    pub geometry: Geometry,
}

/// One synthetic image: detector regions plus the detector's class
/// distributions and the tags sampled from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: u32,
    pub regions: Vec<Region>,
    pub p_obj: Vec<Vec<f32>>,
    pub p_attr: Vec<Vec<f32>>,
    pub object_tags: Vec<u32>,
    pub attribute_tags: Vec<u32>,
}

impl SceneSample {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn contains_pair(&self, object: u32, attribute: u32) -> bool {
        self.regions
            .iter()
            .any(|r| r.object == object && r.attribute == attribute)
    }

    /// Redraws `o_b ~ P_obj`, `a_b ~ P_attr` for every region.
    pub fn resample_tags(&self, world: &ConceptWorld, rng: &mut impl Rng) -> (Vec<u32>, Vec<u32>) {
        sample_tags(world, &self.p_obj, &self.p_attr, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub regions: usize,
    pub noise_sigma: f64,
    pub temperature: f64,
    /// Relative attribute frequencies; uniform when absent.
    pub attribute_weights: Option<Vec<f64>>,
}

fn sample_tags(
    world: &ConceptWorld,
    p_obj: &[Vec<f32>],
    p_attr: &[Vec<f32>],
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<u32>) {
    let draw = |p: &[f32], rng: &mut dyn rand::RngCore| {
        WeightedIndex::new(p).map(|w| w.sample(rng)).unwrap_or(0)
    };
    let mut objs = Vec::with_capacity(p_obj.len());
    let mut attrs = Vec::with_capacity(p_attr.len());
    for (po, pa) in p_obj.iter().zip(p_attr) {
        objs.push(world.vocab.object_token(draw(po, rng)));
        attrs.push(world.vocab.attribute_token(draw(pa, rng)));
    }
    (objs, attrs)
}

fn softmax_f64(logits: &[f64]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| (x / z) as f32).collect()
}

/// Simulated detector: logits are negative squared distances to the nearest
/// composed concept `prototype_o + offset_a`, divided by `temperature`;
/// objects marginalise over attributes by the min and vice versa.
pub fn detector_distributions(
    world: &ConceptWorld,
    feature: &[f32],
    temperature: f64,
) -> (Vec<f32>, Vec<f32>) {
    let (no, na) = (world.vocab.n_objects, world.vocab.n_attributes);
    let mut dist = vec![0.0f64; no * na];
    for o in 0..no {
        let p = world.object_prototypes.row(o);
        for a in 0..na {
            let off = world.attribute_offsets.row(a);
            dist[o * na + a] = feature
                .iter()
                .zip(p.iter().zip(off))
                .map(|(&f, (&p, &q))| {
                    let d = f as f64 - (p as f64 + q as f64);
                    d * d
                })
                .sum();
        }
    }
    let obj_logits: Vec<f64> = (0..no)
        .map(|o| {
            -dist[o * na..(o + 1) * na]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
                / temperature
        })
        .collect();
    let attr_logits: Vec<f64> = (0..na)
        .map(|a| {
            -(0..no)
                .map(|o| dist[o * na + a])
                .fold(f64::INFINITY, f64::min)
                / temperature
        })
        .collect();
    (softmax_f64(&obj_logits), softmax_f64(&attr_logits))
}

pub fn gen_scene(
    world: &ConceptWorld,
    rng: &mut impl Rng,
    id: u32,
    cfg: &SceneConfig,
) -> Result<SceneSample> {
    if cfg.noise_sigma < 0.0 || !cfg.noise_sigma.is_finite() {
        return Err(WvlpError::Config(format!(
            "noise_sigma = {} must be ≥ 0",
            cfg.noise_sigma
        )));
    }
    if cfg.temperature <= 0.0 {
        return Err(WvlpError::Config("detector temperature must be > 0".into()));
    }
    let (no, na, d) = (world.vocab.n_objects, world.vocab.n_attributes, world.d_v);
    let attr_dist = match &cfg.attribute_weights {
        Some(w) if w.len() == na => {
            Some(WeightedIndex::new(w).map_err(|e| WvlpError::Config(e.to_string()))?)
        }
        Some(w) => {
            return Err(WvlpError::Config(format!(
                "{} attribute weights for {na} attributes",
                w.len()
            )))
        }
        None => None,
    };
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| WvlpError::Config(e.to_string()))?;

    let mut regions = Vec::with_capacity(cfg.regions);
    let mut p_obj = Vec::with_capacity(cfg.regions);
    let mut p_attr = Vec::with_capacity(cfg.regions);
    for _ in 0..cfg.regions {
        let object = rng.gen_range(0..no);
        let attribute = match &attr_dist {
            Some(w) => w.sample(rng),
            None => rng.gen_range(0..na),
        };
        let proto = world.object_prototypes.row(object);
        let off = world.attribute_offsets.row(attribute);
        let feature: Vec<f32> = (0..d)
            .map(|j| {
                let eps = if cfg.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                (proto[j] as f64 + off[j] as f64 + eps) as f32
            })
            .collect();
        let w = rng.gen_range(0.1..=0.5f32);
        let h = rng.gen_range(0.1..=0.5f32);
        let x = rng.gen_range(0.0..=1.0 - w);
        let y = rng.gen_range(0.0..=1.0 - h);
        let (po, pa) = detector_distributions(world, &feature, cfg.temperature);
        p_obj.push(po);
        p_attr.push(pa);
        regions.push(Region {
            object: object as u32,
            attribute: attribute as u32,
            feature,
            geometry: [x, y, w, h],
        });
    }
    let (object_tags, attribute_tags) = sample_tags(world, &p_obj, &p_attr, rng);
    Ok(SceneSample {
        id,
        regions,
        p_obj,
        p_attr,
        object_tags,
        attribute_tags,
    })
}

/// Caption tokens. `source_scene` is only populated on paired splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionSample {
    pub tokens: Vec<u32>,
    pub source_scene: Option<u32>,
}

/// Describes 2–4 random regions as `attribute object` word pairs, shuffles the
/// pairs and scatters `n_fillers` filler words between them.
pub fn gen_caption(
    scene: &SceneSample,
    world: &ConceptWorld,
    rng: &mut impl Rng,
    n_fillers: usize,
) -> Result<CaptionSample> {
    let b = scene.n_regions();
    if b == 0 {
        return Err(WvlpError::Empty(
            "caption of a scene without regions".into(),
        ));
    }
    let k = rng.gen_range(2..=4).min(b);
    let picked = rand::seq::index::sample(rng, b, k).into_vec();
    let mut units: Vec<Vec<u32>> = picked
        .iter()
        .map(|&r| {
            let reg = &scene.regions[r];
            vec![
                world.vocab.attribute_token(reg.attribute as usize),
                world.vocab.object_token(reg.object as usize),
            ]
        })
        .collect();
    for _ in 0..n_fillers {
        units.push(vec![world
            .vocab
            .filler_token(rng.gen_range(0..world.vocab.n_fillers))]);
    }
    units.shuffle(rng);
    Ok(CaptionSample {
        tokens: units.concat(),
        source_scene: Some(scene.id),
    })
}
