//! Diagnostic probes: attention mass by modality per layer, and the
//! singular-value spectrum of the token embedding table.

use crate::corpus::{derived_rng, ConceptWorld, SceneSample};
use crate::encoder::{embed_rows, encoder_forward, s2_rows, PositionKind, SequenceBatch};
use crate::error::{Result, WvlpError};
use crate::model::Model;
use crate::nnmath::{DenseArray, Graph, Real};

const ANALYSIS_TAG_STREAM: u64 = 43;

/// Key/query role in an S2 sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Start,
    Image,
    Tag,
}

fn role(kind: PositionKind) -> Result<Role> {
    match kind {
        PositionKind::Start => Ok(Role::Start),
        PositionKind::Region(_) => Ok(Role::Image),
        PositionKind::Tag(_) => Ok(Role::Tag),
        other => Err(WvlpError::Contract(format!(
            "{other:?} row in an S2 sequence"
        ))),
    }
}

pub const MASS_CATEGORIES: [&str; 6] = [
    "img_self_att",
    "img2tag_cross_att",
    "img2start_att",
    "tag_self_att",
    "tag2img_cross_att",
    "tag2start_att",
];

/// Per layer, the six category averages in [`MASS_CATEGORIES`] order. The
/// first three partition the mass of visual queries, the last three that of
/// tag queries. Averaged over heads, query positions and scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMassReport {
    pub layers: Vec<[f64; 6]>,
    /// Largest `|Σ buckets − 1|` over every individual query and head.
    pub max_partition_error: f64,
}

impl AttentionMassReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("layer,category,mass\n");
        for (l, m) in self.layers.iter().enumerate() {
            for (c, v) in MASS_CATEGORIES.iter().zip(m) {
                out.push_str(&format!("{l},{c},{v}\n"));
            }
        }
        out
    }
}

/// Runs S2 forwards (unmasked regions, sampled tags) and partitions each
/// attention row's mass by the role of its keys.
pub fn attention_mass(
    model: &Model<f32>,
    world: &ConceptWorld,
    scenes: &[&SceneSample],
    seed: u64,
) -> Result<AttentionMassReport> {
    if scenes.is_empty() {
        return Err(WvlpError::Empty("no scenes for the attention probe".into()));
    }
    let ec = &model.config.encoder;
    let mut seqs = SequenceBatch::default();
    let mut visual = Vec::new();
    let mut offset = 0;
    for s in scenes {
        let (objects, attributes) = s.resample_tags(
            world,
            &mut derived_rng(seed, &[ANALYSIS_TAG_STREAM, s.id as u64]),
        );
        let geometry: Vec<_> = s.regions.iter().map(|r| r.geometry).collect();
        let attrs = model.config.attributes.then_some(attributes.as_slice());
        seqs.push_sequence(s2_rows(offset, &geometry, &objects, attrs)?);
        for r in &s.regions {
            visual.extend_from_slice(&r.feature);
        }
        offset += s.n_regions();
    }
    let mut g = Graph::new(&model.params);
    let v = g.constant(DenseArray::matrix(offset, ec.d_v, visual));
    let x = embed_rows(&mut g, &model.layout.emb, ec, &seqs.rows, Some(v))?;
    let out = encoder_forward(&mut g, &model.layout.encoder, ec, x, &seqs)?;
    let roles: Vec<Role> = seqs
        .rows
        .iter()
        .map(|r| role(r.kind))
        .collect::<Result<_>>()?;

    let mut layers = Vec::with_capacity(out.attention.len());
    let mut max_err = 0.0f64;
    for &a in &out.attention {
        let probs = g.attention_probs(a).ok_or_else(|| {
            WvlpError::Contract("encoder attention node carries no weights".into())
        })?;
        let mut sums = [0.0f64; 6];
        let (mut n_img, mut n_tag) = (0usize, 0usize);
        for (si, seg) in probs.segments.iter().enumerate() {
            for h in 0..probs.n_heads {
                let p = probs.get(si, h);
                for qi in 0..seg.q_len {
                    let base = match roles[seg.q_start + qi] {
                        Role::Image => 0,
                        Role::Tag => 3,
                        Role::Start => continue,
                    };
                    let mut b = [0.0f64; 3];
                    for ki in 0..seg.k_len {
                        let w = p.get(qi, ki) as f64;
                        let slot = match (roles[seg.k_start + ki], base) {
                            (Role::Image, 0) | (Role::Tag, 3) => 0,
                            (Role::Tag, 0) | (Role::Image, 3) => 1,
                            _ => 2,
                        };
                        b[slot] += w;
                    }
                    max_err = max_err.max((b.iter().sum::<f64>() - 1.0).abs());
                    for j in 0..3 {
                        sums[base + j] += b[j];
                    }
                    if base == 0 {
                        n_img += 1;
                    } else {
                        n_tag += 1;
                    }
                }
            }
        }
        for j in 0..3 {
            sums[j] /= n_img.max(1) as f64;
            sums[3 + j] /= n_tag.max(1) as f64;
        }
        layers.push(sums);
    }
    Ok(AttentionMassReport {
        layers,
        max_partition_error: max_err,
    })
}

/// Singular values of the token table, descending, and the same divided by
/// the largest.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl SpectrumReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("index,singular_value,normalized\n");
        for (i, (v, n)) in self.values.iter().zip(&self.normalized).enumerate() {
            out.push_str(&format!("{i},{v},{n}\n"));
        }
        out
    }
}

/// One-sided Jacobi SVD: rotates column pairs until all are orthogonal;
/// the column norms are then the singular values.
pub fn singular_values<T: Real>(a: &DenseArray<T>) -> Result<Vec<f64>> {
    let (r, c) = (a.rows(), a.cols());
    if r == 0 || c == 0 {
        return Err(WvlpError::Empty(
            "singular values of an empty matrix".into(),
        ));
    }
    // work on the orientation with fewer columns
    let (m, n) = if r >= c { (r, c) } else { (c, r) };
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..m)
                .map(|i| {
                    if r >= c {
                        a.get(i, j).as_f64()
                    } else {
                        a.get(j, i).as_f64()
                    }
                })
                .collect()
        })
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols.split_at_mut(q);
                let (u, v) = (&mut left[p], &mut right[0]);
                for (x, y) in u.iter_mut().zip(v.iter_mut()) {
                    let (a0, b0) = (*x, *y);
                    *x = cs * a0 - sn * b0;
                    *y = sn * a0 + cs * b0;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn embedding_spectrum<T: Real>(model: &Model<T>) -> Result<SpectrumReport> {
    let table = &model.params.get(model.layout.emb.token).value;
    let values = singular_values(table)?;
    let top = values[0];
    let normalized = values
        .iter()
        .map(|v| if top > 0.0 { v / top } else { 0.0 })
        .collect();
    Ok(SpectrumReport { values, normalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitKind;
    use crate::model::tests::micro_config;
    use crate::objectives::tests::micro_corpus;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gram_oracle(rows: usize, cols: usize, vals: &[f64]) -> Vec<f64> {
        let a = DMatrix::from_row_slice(rows, cols, vals);
        let g = a.transpose() * &a;
        let mut e: Vec<f64> = g
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|l| l.max(0.0).sqrt())
            .collect();
        e.sort_by(|a, b| b.total_cmp(a));
        e
    }

    #[test]
    fn spectrum_matches_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (r, c) in [(8, 5), (5, 8), (12, 12), (30, 4)] {
            let vals: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = singular_values(&DenseArray::matrix(r, c, vals.clone())).unwrap();
            let want = gram_oracle(r, c, &vals);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-5, "{r}x{c}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn spectrum_trivial_tables() {
        let eye: Vec<f64> = (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        let s = singular_values(&DenseArray::matrix(4, 4, eye)).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        // rank one: outer product of (1,2,3) and (1,-1)
        let s = singular_values(&DenseArray::matrix(
            3,
            2,
            vec![1.0, -1.0, 2.0, -2.0, 3.0, -3.0],
        ))
        .unwrap();
        assert!((s[0] - (14.0f64 * 2.0).sqrt()).abs() < 1e-12 && s[1].abs() < 1e-12);
        assert!(singular_values(&DenseArray::<f64>::matrix(0, 3, vec![])).is_err());
    }

    #[test]
    fn buckets_partition_each_query() {
        let c = micro_corpus();
        let m: Model<f32> =
            Model::new(micro_config(true, true), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let scenes: Vec<&SceneSample> = c
            .split(SplitKind::Pretrain)
            .unwrap()
            .scenes
            .iter()
            .take(5)
            .collect();
        let r = attention_mass(&m, &c.world, &scenes, 1).unwrap();
        assert_eq!(r.layers.len(), 1);
        assert!(r.max_partition_error < 1e-5);
        for l in &r.layers {
            assert!((l[0] + l[1] + l[2] - 1.0).abs() < 1e-5);
            assert!((l[3] + l[4] + l[5] - 1.0).abs() < 1e-5);
        }
        assert_eq!(r.csv().lines().count(), 1 + 6);
    }

    #[test]
    fn uniform_attention_gives_key_fractions() {
        // zero query/key weights make every attention row uniform
        let c = micro_corpus();
        let mut m: Model<f32> =
            Model::new(micro_config(false, true), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ids: Vec<_> = m
            .params
            .iter()
            .filter(|(_, p)| p.name.contains(".attn.query") || p.name.contains(".attn.key"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            m.params
                .get_mut(id)
                .value
                .values_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let scenes: Vec<&SceneSample> = c
            .split(SplitKind::Pretrain)
            .unwrap()
            .scenes
            .iter()
            .take(3)
            .collect();
        let r = attention_mass(&m, &c.world, &scenes, 1).unwrap();
        // 3 regions + 3 tags + start = 7 keys
        let want = [
            3.0 / 7.0,
            3.0 / 7.0,
            1.0 / 7.0,
            3.0 / 7.0,
            3.0 / 7.0,
            1.0 / 7.0,
        ];
        for (g, w) in r.layers[0].iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{:?}", r.layers[0]);
        }
    }
}
