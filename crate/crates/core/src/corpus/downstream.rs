use rand::seq::SliceRandom;
use rand::Rng;

use super::scene::SceneSample;
use super::world::{ConceptWorld, QUERY};
use crate::error::{Result, WvlpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Rec,
    Vqa,
    Ve,
}

pub const ANSWER_NO: usize = 0;
pub const ANSWER_YES: usize = 1;
pub const ENTAILMENT: usize = 0;
pub const NEUTRAL: usize = 1;
pub const CONTRADICTION: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskInstance {
    /// Referring expression `attribute object`; `gold` is the region index.
    Rec { query: Vec<u32>, gold: usize },
    /// `attribute object ?`; answer is [`ANSWER_YES`] or [`ANSWER_NO`].
    Vqa { question: Vec<u32>, answer: usize },
    /// Caption of pairs; label is [`ENTAILMENT`] or [`CONTRADICTION`].
    Ve { caption: Vec<u32>, label: usize },
}

impl TaskInstance {
    pub fn text(&self) -> &[u32] {
        match self {
            TaskInstance::Rec { query, .. } => query,
            TaskInstance::Vqa { question, .. } => question,
            TaskInstance::Ve { caption, .. } => caption,
        }
    }

    pub fn label(&self) -> usize {
        match self {
            TaskInstance::Rec { gold, .. } => *gold,
            TaskInstance::Vqa { answer, .. } => *answer,
            TaskInstance::Ve { label, .. } => *label,
        }
    }
}

/// Some `(object, attribute)` not present in the scene, preferring an object
/// that is present (so only the attribute tells the difference).
fn absent_pair(
    scene: &SceneSample,
    world: &ConceptWorld,
    rng: &mut impl Rng,
) -> Option<(u32, u32)> {
    let na = world.vocab.n_attributes as u32;
    let mut objects: Vec<u32> = scene.regions.iter().map(|r| r.object).collect();
    objects.shuffle(rng);
    for o in objects {
        let mut attrs: Vec<u32> = (0..na).collect();
        attrs.shuffle(rng);
        if let Some(a) = attrs.into_iter().find(|&a| !scene.contains_pair(o, a)) {
            return Some((o, a));
        }
    }
    let mut all: Vec<(u32, u32)> = (0..world.vocab.n_objects as u32)
        .flat_map(|o| (0..na).map(move |a| (o, a)))
        .filter(|&(o, a)| !scene.contains_pair(o, a))
        .collect();
    all.shuffle(rng);
    all.first().copied()
}

pub fn gen_downstream_instance(
    kind: TaskKind,
    scene: &SceneSample,
    world: &ConceptWorld,
    rng: &mut impl Rng,
) -> Result<TaskInstance> {
    let b = scene.n_regions();
    if b == 0 {
        return Err(WvlpError::Empty(
            "downstream instance on a scene without regions".into(),
        ));
    }
    let v = &world.vocab;
    let words = |o: u32, a: u32| vec![v.attribute_token(a as usize), v.object_token(o as usize)];
    match kind {
        TaskKind::Rec => {
            let unique: Vec<usize> = (0..b)
                .filter(|&i| {
                    let r = &scene.regions[i];
                    scene
                        .regions
                        .iter()
                        .filter(|q| q.object == r.object && q.attribute == r.attribute)
                        .count()
                        == 1
                })
                .collect();
            let gold = if unique.is_empty() {
                rng.gen_range(0..b)
            } else {
                unique[rng.gen_range(0..unique.len())]
            };
            let r = &scene.regions[gold];
            Ok(TaskInstance::Rec {
                query: words(r.object, r.attribute),
                gold,
            })
        }
        TaskKind::Vqa => {
            let yes = rng.gen_bool(0.5);
            let (o, a) = if yes {
                let r = &scene.regions[rng.gen_range(0..b)];
                (r.object, r.attribute)
            } else {
                absent_pair(scene, world, rng).ok_or_else(|| {
                    WvlpError::Contract("scene contains every concept pair".into())
                })?
            };
            let mut question = words(o, a);
            question.push(QUERY);
            Ok(TaskInstance::Vqa {
                question,
                answer: if yes { ANSWER_YES } else { ANSWER_NO },
            })
        }
        TaskKind::Ve => {
            let entail = rng.gen_bool(0.5);
            let k = 2.min(b);
            let picked = rand::seq::index::sample(rng, b, k).into_vec();
            let mut pairs: Vec<(u32, u32)> = picked
                .iter()
                .map(|&i| (scene.regions[i].object, scene.regions[i].attribute))
                .collect();
            if !entail {
                let swap = rng.gen_range(0..pairs.len());
                let o = pairs[swap].0;
                let mut attrs: Vec<u32> = (0..v.n_attributes as u32).collect();
                attrs.shuffle(rng);
                match attrs.into_iter().find(|&a| !scene.contains_pair(o, a)) {
                    Some(a) => pairs[swap].1 = a,
                    None => {
                        pairs[swap] = absent_pair(scene, world, rng).ok_or_else(|| {
                            WvlpError::Contract("scene contains every concept pair".into())
                        })?
                    }
                }
            }
            Ok(TaskInstance::Ve {
                caption: pairs.iter().flat_map(|&(o, a)| words(o, a)).collect(),
                label: if entail { ENTAILMENT } else { CONTRADICTION },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scene::{gen_scene, SceneConfig};
    use crate::corpus::world::{gen_world, WorldSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(regions: usize) -> (ConceptWorld, SceneConfig) {
        let w = gen_world(&WorldSpec {
            seed: 2,
            n_objects: 8,
            n_attributes: 4,
            d_v: 32,
            n_fillers: 10,
            last_layer_heads: 4,
        })
        .unwrap();
        (
            w,
            SceneConfig {
                regions,
                noise_sigma: 0.0,
                temperature: 0.5,
                attribute_weights: None,
            },
        )
    }

    #[test]
    fn rec_single_region_gold_zero() {
        let (w, c) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = gen_scene(&w, &mut rng, 0, &c).unwrap();
        let inst = gen_downstream_instance(TaskKind::Rec, &s, &w, &mut rng).unwrap();
        assert_eq!(inst.label(), 0);
    }

    #[test]
    fn vqa_answers_match_scene_and_balance() {
        let (w, c) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut yes = 0;
        for i in 0..10_000 {
            let s = gen_scene(&w, &mut rng, i, &c).unwrap();
            let inst = gen_downstream_instance(TaskKind::Vqa, &s, &w, &mut rng).unwrap();
            let q = inst.text();
            let a = match w.vocab.kind(q[0]) {
                crate::corpus::world::TokenKind::Attribute(a) => a as u32,
                k => panic!("{k:?}"),
            };
            let o = w.vocab.object_class(q[1]).unwrap() as u32;
            assert_eq!(s.contains_pair(o, a), inst.label() == ANSWER_YES);
            yes += (inst.label() == ANSWER_YES) as usize;
        }
        let rate = yes as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn ve_labels_follow_pairs() {
        let (w, c) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..500 {
            let s = gen_scene(&w, &mut rng, i, &c).unwrap();
            let inst = gen_downstream_instance(TaskKind::Ve, &s, &w, &mut rng).unwrap();
            let toks = inst.text();
            let all_present = toks.chunks(2).all(|p| {
                let a = match w.vocab.kind(p[0]) {
                    crate::corpus::world::TokenKind::Attribute(a) => a as u32,
                    _ => unreachable!(),
                };
                s.contains_pair(w.vocab.object_class(p[1]).unwrap() as u32, a)
            });
            assert_eq!(all_present, inst.label() == ENTAILMENT);
        }
    }

    #[test]
    fn empty_scene_rejected() {
        let (w, c) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = gen_scene(&w, &mut rng, 0, &c).unwrap();
        s.regions.clear();
        assert!(gen_downstream_instance(TaskKind::Vqa, &s, &w, &mut rng).is_err());
    }
}
