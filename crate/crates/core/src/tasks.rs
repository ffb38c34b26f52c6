//! Fine-tuning heads and evaluation: retrieval scoring, the 4-way objective,
//! recall@K, and the VQA / VE / REC heads.

use rand::Rng;

use crate::corpus::{SceneSample, TaskInstance, TaskKind};
use crate::encoder::{
    embed_rows, encoder_forward, joint_rows, EncoderOutput, PositionKind, SequenceBatch,
};
use crate::error::{Result, WvlpError};
use crate::model::Model;
use crate::nnmath::{DenseArray, Graph, Real, Targets, Var};

/// Stacked joint sequences `[start] + caption + regions` with the pooling
/// groups of each sequence.
#[derive(Clone, Debug)]
pub struct JointBatch {
    pub seqs: SequenceBatch,
    pub text_groups: Vec<Vec<usize>>,
    pub visual_groups: Vec<Vec<usize>>,
}

pub fn joint_forward<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    pairs: &[(&[u32], &SceneSample)],
) -> Result<(JointBatch, EncoderOutput)> {
    let ec = &model.config.encoder;
    let mut seqs = SequenceBatch::default();
    let mut visual = Vec::new();
    let mut offset = 0;
    for (text, scene) in pairs {
        let geometry: Vec<_> = scene.regions.iter().map(|r| r.geometry).collect();
        seqs.push_sequence(joint_rows(text, offset, &geometry));
        for r in &scene.regions {
            if r.feature.len() != ec.d_v {
                return Err(WvlpError::Shape(format!(
                    "region feature of width {} for d_v = {}",
                    r.feature.len(),
                    ec.d_v
                )));
            }
            visual.extend(r.feature.iter().map(|&x| T::of(x as f64)));
        }
        offset += scene.n_regions();
    }
    if offset == 0 {
        return Err(WvlpError::Empty("joint batch without regions".into()));
    }
    let v = g.constant(DenseArray::matrix(offset, ec.d_v, visual));
    let x = embed_rows(g, &model.layout.emb, ec, &seqs.rows, Some(v))?;
    let out = encoder_forward(g, &model.layout.encoder, ec, x, &seqs)?;
    let text_groups = (0..pairs.len())
        .map(|i| seqs.rows_where(i, |k| matches!(k, PositionKind::Caption(_))))
        .collect();
    let visual_groups = (0..pairs.len())
        .map(|i| seqs.rows_where(i, |k| matches!(k, PositionKind::Region(_))))
        .collect();
    Ok((
        JointBatch {
            seqs,
            text_groups,
            visual_groups,
        },
        out,
    ))
}

/// Mean of the states in each group (the start row is never in a group).
pub fn pool<T: Real>(g: &mut Graph<'_, T>, states: Var, groups: &[Vec<usize>]) -> Result<Var> {
    g.group_mean(states, groups)
}

/// `γ · cos(f_t(t̄), f_v(v̄))` per row, `[n, 1]`.
pub fn match_score<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    t_bar: Var,
    v_bar: Var,
) -> Result<Var> {
    let h = &model.layout.tasks.retrieval;
    let (ft, fv) = (h.f_t.forward(g, t_bar)?, h.f_v.forward(g, v_bar)?);
    let c = g.cosine_rows(ft, fv)?;
    Ok(g.scale(c, T::of(model.config.gamma)))
}

pub fn joint_scores<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    pairs: &[(&[u32], &SceneSample)],
) -> Result<Var> {
    let (jb, out) = joint_forward(g, model, pairs)?;
    let t = pool(g, out.states, &jb.text_groups)?;
    let v = pool(g, out.states, &jb.visual_groups)?;
    match_score(g, model, t, v)
}

/// Anchor pair followed by (scene, wrong caption), (wrong scene, caption),
/// (wrong scene, wrong caption); indices into a paired split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FourWayInstance {
    pub anchor: usize,
    pub wrong_caption: usize,
    pub wrong_scene: usize,
}

/// Distractors drawn uniformly from the other `n − 1` pairs, with the two
/// distractors from different pairs so the last choice is never a match.
pub fn sample_fourway(anchor: usize, n: usize, rng: &mut impl Rng) -> Result<FourWayInstance> {
    if n < 3 {
        return Err(WvlpError::Empty(format!(
            "4-way sampling needs ≥ 3 pairs, split has {n}"
        )));
    }
    let other = |rng: &mut dyn rand::RngCore, avoid: &[usize]| loop {
        let j = rng.gen_range(0..n);
        if !avoid.contains(&j) {
            break j;
        }
    };
    let wrong_caption = other(rng, &[anchor]);
    let wrong_scene = other(rng, &[anchor, wrong_caption]);
    Ok(FourWayInstance {
        anchor,
        wrong_caption,
        wrong_scene,
    })
}

/// Softmax cross-entropy over the four scores with gold index 0.
pub fn fourway_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    instances: &[FourWayInstance],
    captions: &[&[u32]],
    scenes: &[&SceneSample],
) -> Result<Var> {
    let mut pairs = Vec::with_capacity(4 * instances.len());
    for i in instances {
        pairs.push((captions[i.anchor], scenes[i.anchor]));
        pairs.push((captions[i.wrong_caption], scenes[i.anchor]));
        pairs.push((captions[i.anchor], scenes[i.wrong_scene]));
        pairs.push((captions[i.wrong_caption], scenes[i.wrong_scene]));
    }
    let s = joint_scores(g, model, &pairs)?;
    fourway_from_scores(g, s, instances.len())
}

/// `scores: [4n, 1]` grouped in fours, anchor first.
pub fn fourway_from_scores<T: Real>(g: &mut Graph<'_, T>, scores: Var, n: usize) -> Result<Var> {
    let logits = g.reshape(scores, n, 4)?;
    g.cross_entropy(logits, Targets::Classes(vec![0; n]))
}

/// `scores[c][s]` for every caption × scene pair, in inference chunks.
pub fn score_matrix(
    model: &Model<f32>,
    captions: &[&[u32]],
    scenes: &[&SceneSample],
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    let all: Vec<(usize, usize)> = (0..captions.len())
        .flat_map(|c| (0..scenes.len()).map(move |s| (c, s)))
        .collect();
    let mut out = vec![vec![0.0f32; scenes.len()]; captions.len()];
    for block in all.chunks(chunk.max(1)) {
        let pairs: Vec<_> = block
            .iter()
            .map(|&(c, s)| (captions[c], scenes[s]))
            .collect();
        let mut g = Graph::new(&model.params);
        let s = joint_scores(&mut g, model, &pairs)?;
        for (&(c, sc), &v) in block.iter().zip(g.value(s).values()) {
            out[c][sc] = v;
        }
    }
    Ok(out)
}

/// Recall@K in percent, text retrieval (scene → captions) and image
/// retrieval (caption → scenes).
#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub tr: Vec<f64>,
    pub ir: Vec<f64>,
}

impl RecallTable {
    pub fn r1(&self) -> (f64, f64) {
        let i = self.ks.iter().position(|&k| k == 1).unwrap_or(0);
        (self.tr[i], self.ir[i])
    }

    pub fn csv_rows(&self, split: &str, domain: &str) -> Vec<String> {
        let mut rows = Vec::new();
        for (dir, vals) in [("TR", &self.tr), ("IR", &self.ir)] {
            for (k, v) in self.ks.iter().zip(vals) {
                rows.push(format!("{dir},{k},{v},{split},{domain}"));
            }
        }
        rows
    }
}

pub const RECALL_CSV_HEADER: &str = "direction,K,recall,split,domain";

/// 0-based rank of `gold` among `scores`, higher first, ties to lower index.
fn rank_of(scores: &[f32], gold: usize) -> usize {
    let g = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > g || (s == g && i < gold))
        .count()
}

/// `scores[c][s]`; `gold_scene[c]` is the scene paired with caption `c`.
pub fn recall_at_k(scores: &[Vec<f32>], gold_scene: &[usize], ks: &[usize]) -> Result<RecallTable> {
    let n_c = scores.len();
    if n_c == 0 || gold_scene.len() != n_c {
        return Err(WvlpError::Shape("score matrix and pairing disagree".into()));
    }
    let n_s = scores[0].len();
    let ir_ranks: Vec<usize> = (0..n_c)
        .map(|c| rank_of(&scores[c], gold_scene[c]))
        .collect();
    let mut tr_ranks = Vec::new();
    for s in 0..n_s {
        let column: Vec<f32> = (0..n_c).map(|c| scores[c][s]).collect();
        // best-ranked gold caption when several describe the same scene
        let best = (0..n_c)
            .filter(|&c| gold_scene[c] == s)
            .map(|c| rank_of(&column, c))
            .min();
        if let Some(r) = best {
            tr_ranks.push(r);
        }
    }
    let pct = |ranks: &[usize], k: usize| {
        100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
    };
    Ok(RecallTable {
        ks: ks.to_vec(),
        tr: ks.iter().map(|&k| pct(&tr_ranks, k)).collect(),
        ir: ks.iter().map(|&k| pct(&ir_ranks, k)).collect(),
    })
}

/// Logits of a batch of downstream instances: `[n, 2]` (VQA), `[n, 3]` (VE)
/// or `[n, B]` region scores (REC, equal region counts required).
pub fn task_logits<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    kind: TaskKind,
    items: &[(&TaskInstance, &SceneSample)],
) -> Result<Var> {
    let pairs: Vec<_> = items.iter().map(|(i, s)| (i.text(), *s)).collect();
    let (jb, out) = joint_forward(g, model, &pairs)?;
    let h = &model.layout.tasks;
    match kind {
        TaskKind::Vqa | TaskKind::Ve => {
            let t = pool(g, out.states, &jb.text_groups)?;
            let v = pool(g, out.states, &jb.visual_groups)?;
            let c = g.concat_cols(&[t, v])?;
            if kind == TaskKind::Ve {
                h.ve.forward(g, c)
            } else {
                let x = h.vqa[0].forward(g, c)?;
                let x = g.gelu(x);
                h.vqa[1].forward(g, x)
            }
        }
        TaskKind::Rec => {
            let b = jb.visual_groups[0].len();
            if jb.visual_groups.iter().any(|r| r.len() != b) {
                return Err(WvlpError::Shape(
                    "REC batch with differing region counts".into(),
                ));
            }
            let rows: Vec<usize> = jb.visual_groups.concat();
            let x = g.rows(out.states, &rows)?;
            let x = h.rec[0].forward(g, x)?;
            let x = g.gelu(x);
            let s = h.rec[1].forward(g, x)?;
            g.reshape(s, items.len(), b)
        }
    }
}

pub fn task_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    kind: TaskKind,
    items: &[(&TaskInstance, &SceneSample)],
) -> Result<Var> {
    let logits = task_logits(g, model, kind, items)?;
    g.cross_entropy(
        logits,
        Targets::Classes(items.iter().map(|(i, _)| i.label()).collect()),
    )
}

/// Argmax of each logit row, ties to the lower index.
pub fn predictions<T: Real>(logits: &DenseArray<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

pub fn task_accuracy(
    model: &Model<f32>,
    kind: TaskKind,
    items: &[(&TaskInstance, &SceneSample)],
    chunk: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(WvlpError::Empty("no instances to evaluate".into()));
    }
    let mut correct = 0;
    for block in items.chunks(chunk.max(1)) {
        let mut g = Graph::new(&model.params);
        let l = task_logits(&mut g, model, kind, block)?;
        let pred = predictions(g.value(l));
        correct += pred
            .iter()
            .zip(block)
            .filter(|(p, (i, _))| **p == i.label())
            .count();
    }
    Ok(correct as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_downstream_instance, SplitKind};
    use crate::model::tests::micro_config;
    use crate::nnmath::gradcheck::{check_gradients, GradcheckConfig};
    use crate::nnmath::{ParamId, ParamStore};
    use crate::objectives::tests::micro_corpus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model<f64> {
        Model::new(
            micro_config(true, true),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn set_identity(m: &mut Model<f64>, id: ParamId) {
        let d = m.config.encoder.d_model;
        m.params.get_mut(id).value = DenseArray::matrix(
            d,
            d,
            (0..d * d)
                .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
                .collect(),
        );
    }

    #[test]
    fn pooling_is_the_mean() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.constant(DenseArray::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let p = pool(&mut g, x, &[vec![1], vec![0, 2], vec![1, 1]]).unwrap();
        assert_eq!(g.value(p).values(), &[3.0, 4.0, 3.0, 5.5, 3.0, 4.0]);
        assert!(pool(&mut g, x, &[vec![]]).is_err());
    }

    #[test]
    fn score_bounds() {
        let mut m = model(1);
        let h = m.layout.tasks.retrieval;
        set_identity(&mut m, h.f_t.weight);
        set_identity(&mut m, h.f_v.weight);
        for b in [h.f_t.bias.unwrap(), h.f_v.bias.unwrap()] {
            m.params
                .get_mut(b)
                .value
                .values_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new(&m.params);
        let t = g.constant(DenseArray::matrix(
            2,
            8,
            (0..16).map(|i| (i as f64 + 1.0) * 0.1).collect(),
        ));
        let s = match_score(&mut g, &m, t, t).unwrap();
        assert!(g
            .value(s)
            .values()
            .iter()
            .all(|&x| (x - 16.0).abs() < 1e-12));
        let a = g.constant(DenseArray::matrix(
            1,
            8,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ));
        let b = g.constant(DenseArray::matrix(
            1,
            8,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ));
        let s = match_score(&mut g, &m, a, b).unwrap();
        assert_eq!(g.scalar(s), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m2 = model(2);
        let mut g = Graph::new(&m2.params);
        for _ in 0..50 {
            let x = g.constant(DenseArray::matrix(
                1,
                8,
                (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ));
            let y = g.constant(DenseArray::matrix(
                1,
                8,
                (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ));
            let s = match_score(&mut g, &m2, x, y).unwrap();
            assert!(g.scalar(s).abs() <= 16.0 + 1e-12);
        }
    }

    #[test]
    fn fourway_limits() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let equal = g.constant(DenseArray::matrix(8, 1, vec![3.0; 8]));
        let l = fourway_from_scores(&mut g, equal, 2).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
        let sharp = g.constant(DenseArray::matrix(4, 1, vec![60.0, -60.0, -60.0, -60.0]));
        let l = fourway_from_scores(&mut g, sharp, 1).unwrap();
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn distractors_differ_from_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for a in 0..200 {
            let i = sample_fourway(a % 5, 5, &mut rng).unwrap();
            assert!(
                i.wrong_caption != i.anchor
                    && i.wrong_scene != i.anchor
                    && i.wrong_scene != i.wrong_caption
            );
        }
        assert!(sample_fourway(0, 2, &mut rng).is_err());
    }

    #[test]
    fn fourway_gradcheck() {
        let c = micro_corpus();
        let split = c.split(SplitKind::FinetuneTrain).unwrap();
        let caps: Vec<&[u32]> = split.captions.iter().map(|c| c.tokens.as_slice()).collect();
        let scenes: Vec<&SceneSample> = split.scenes.iter().collect();
        let inst = [
            FourWayInstance {
                anchor: 0,
                wrong_caption: 1,
                wrong_scene: 2,
            },
            FourWayInstance {
                anchor: 3,
                wrong_caption: 0,
                wrong_scene: 1,
            },
        ];
        let mut m = model(5);
        let mut params = std::mem::take(&mut m.params);
        let loss = |p: &ParamStore<f64>| {
            let mut g = Graph::new(p);
            let l = fourway_loss(&mut g, &m, &inst, &caps, &scenes).unwrap();
            (g.scalar(l), g.backward(l))
        };
        let report = check_gradients(&mut params, loss, &GradcheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn recall_oracles() {
        let n = 20;
        let perfect: Vec<Vec<f32>> = (0..n)
            .map(|c| (0..n).map(|s| if s == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let gold: Vec<usize> = (0..n).collect();
        let t = recall_at_k(&perfect, &gold, &[1, 5, 10]).unwrap();
        assert!(t.tr.iter().chain(&t.ir).all(|&r| r == 100.0));
        // constant scores: ties go to the lower index, so only item 0 is found at K=1
        let flat = vec![vec![0.5f32; n]; n];
        let t = recall_at_k(&flat, &gold, &[1, 5, 10]).unwrap();
        assert_eq!(t.r1(), (5.0, 5.0));
        assert_eq!(t.tr[1], 25.0);
    }

    #[test]
    fn random_scorer_recall_matches_simulation() {
        let n = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gold: Vec<usize> = (0..n).collect();
        let mut tr1 = 0.0;
        let trials = 50;
        for _ in 0..trials {
            let s: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen::<f32>()).collect())
                .collect();
            let t = recall_at_k(&s, &gold, &[1, 5, 10]).unwrap();
            assert!(t.tr[0] <= t.tr[1] && t.tr[1] <= t.tr[2]);
            assert!(t.ir[0] <= t.ir[1] && t.ir[1] <= t.ir[2]);
            tr1 += t.tr[0];
        }
        // independent oracle: the gold item is ranked first with probability 1/n
        let mean = tr1 / trials as f64;
        assert!((mean - 1.0).abs() < 0.6, "{mean}");
    }

    #[test]
    fn rec_single_region_and_ve_shape() {
        let c = micro_corpus();
        let world = &c.world;
        let mut scene = c.split(SplitKind::FinetuneTest).unwrap().scenes[0].clone();
        let m = model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ve = gen_downstream_instance(TaskKind::Ve, &scene, world, &mut rng).unwrap();
        let mut g = Graph::new(&m.params);
        let l = task_logits(&mut g, &m, TaskKind::Ve, &[(&ve, &scene)]).unwrap();
        assert_eq!(g.value(l).shape(), &[1, 3]);
        scene.regions.truncate(1);
        let rec = gen_downstream_instance(TaskKind::Rec, &scene, world, &mut rng).unwrap();
        let mut g = Graph::new(&m.params);
        let l = task_logits(&mut g, &m, TaskKind::Rec, &[(&rec, &scene)]).unwrap();
        assert_eq!(predictions(g.value(l)), vec![0]);
    }
}
