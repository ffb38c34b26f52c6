use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wvlp::analysis::singular_values;
use wvlp::corpus::{gen_world, SceneSample, WorldSpec};
use wvlp::nnmath::{DenseArray, Graph, ParamStore, Segment};
use wvlp::objectives::{plan_masks, PretrainInputs, SceneInput};
use wvlp::tasks::recall_at_k;
use wvlp::train::{lr_at, LrSchedule};
use wvlp::vocab::{
    assign, dictionary_from_bytes, dictionary_to_bytes, momentum_update, VisualDictionary,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseArray<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| DenseArray::matrix(rows, cols, v))
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = DenseArray<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(
        x in sized_matrix(9, 8),
        heads in prop::sample::select(vec![1usize, 2, 4]),
        cut in 0usize..9,
    ) {
        let n = x.rows();
        let cut = cut.min(n - 1) + 1;
        let mut segs = vec![Segment::within(0, cut)];
        if cut < n {
            segs.push(Segment::within(cut, n - cut));
        }
        let width = 8 * heads;
        let wide = DenseArray::matrix(n, width, (0..n * width).map(|i| x.values()[i % x.len()] * ((i % 7) as f64 - 3.0)).collect());
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let q = g.constant(wide.clone());
        let k = g.constant(wide.map(|v| -v * 0.5));
        let v = g.constant(wide);
        let out = g.attention(q, k, v, heads, &segs).unwrap();
        let probs = g.attention_probs(out).unwrap();
        for p in &probs.probs {
            for r in 0..p.rows() {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }
    }

    #[test]
    fn assignment_is_nearest_entry(x in prop::collection::vec(-2.0f64..2.0, 6), d in matrix(5, 6)) {
        let dict = VisualDictionary::new(d, 0.5).unwrap();
        let a = assign(&x, &dict).unwrap();
        let dist = |k: usize| -> f64 { x.iter().zip(dict.entry(k)).map(|(p, q)| (p - q) * (p - q)).sum() };
        for k in 0..dict.len() {
            prop_assert!(dist(a) <= dist(k));
            if k < a {
                prop_assert!(dist(k) > dist(a));
            }
        }
    }

    #[test]
    fn momentum_zero_is_batch_centroid(batch in (1usize..=20).prop_flat_map(|n| matrix(n, 4)), d in matrix(3, 4)) {
        let mut fresh = VisualDictionary::new(d.clone(), 0.0).unwrap();
        let assignment = momentum_update(&mut fresh, &batch).unwrap();
        for k in 0..3 {
            let members: Vec<usize> = (0..batch.rows()).filter(|&i| assignment[i] == k).collect();
            for j in 0..4 {
                let want = if members.is_empty() {
                    d.get(k, j)
                } else {
                    members.iter().fold(0.0, |s, &i| s + batch.get(i, j)) / members.len() as f64
                };
                prop_assert_eq!(fresh.entries.get(k, j).to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn dictionary_bytes_round_trip(vals in prop::collection::vec(-1e3f32..1e3, 1..40), m in 0.0f64..1.0) {
        let d = 4;
        let c = vals.len().div_ceil(d);
        let mut v = vals.clone();
        v.resize(c * d, 0.5);
        let dict = VisualDictionary::new(DenseArray::matrix(c, d, v), m).unwrap();
        let back = dictionary_from_bytes(&dictionary_to_bytes(&dict), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.entries, dict.entries);
        prop_assert_eq!(back.momentum.to_bits(), dict.momentum.to_bits());
    }

    #[test]
    fn singular_values_ordered_and_preserve_frobenius(a in sized_matrix(10, 10)) {
        let s = singular_values(&a).unwrap();
        prop_assert_eq!(s.len(), a.rows().min(a.cols()));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|&x| x >= 0.0));
        let fro: f64 = a.values().iter().map(|x| x * x).sum();
        let sq: f64 = s.iter().map(|x| x * x).sum();
        prop_assert!((fro - sq).abs() <= 1e-8 * fro.max(1.0));
    }

    #[test]
    fn recall_is_monotone_and_scale_invariant(
        scores in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 6), 6),
        factor in prop::sample::select(vec![0.5f32, 2.0, 4.0]),
    ) {
        let gold: Vec<usize> = (0..6).collect();
        let ks = [1, 2, 3, 6];
        let t = recall_at_k(&scores, &gold, &ks).unwrap();
        for dir in [&t.tr, &t.ir] {
            prop_assert!(dir.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(dir.iter().all(|&r| (0.0..=100.0).contains(&r)));
            prop_assert_eq!(dir[3], 100.0);
        }
        let scaled: Vec<Vec<f32>> = scores.iter().map(|r| r.iter().map(|x| x * factor).collect()).collect();
        prop_assert_eq!(recall_at_k(&scaled, &gold, &ks).unwrap(), t);
    }

    #[test]
    fn schedule_stays_within_peak(total in 1usize..500, warm in 0.0f64..0.5, step in 0usize..600) {
        let s = LrSchedule { total, warmup_frac: warm, peak: 1e-3 };
        let step = step.min(total);
        let lr = lr_at(step, &s).unwrap();
        prop_assert!((0.0..=1e-3 + 1e-15).contains(&lr));
        prop_assert_eq!(lr_at(total, &s).unwrap(), 0.0);
    }

    #[test]
    fn masking_never_touches_attributes(seed in 0u64..1000, p in 0.0f64..=1.0, lens in prop::collection::vec(1usize..12, 1..6)) {
        let world = gen_world(&WorldSpec { seed: 3, n_objects: 5, n_attributes: 4, d_v: 8, n_fillers: 6, last_layer_heads: 2 }).unwrap();
        let v = &world.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let captions: Vec<Vec<u32>> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                (0..n)
                    .map(|j| match (i + j) % 3 {
                        0 => v.attribute_token((i + j) % 4),
                        1 => v.object_token(j % 5),
                        _ => v.filler_token(j % 6),
                    })
                    .collect()
            })
            .collect();
        let scene = SceneSample {
            id: 0,
            regions: Vec::new(),
            p_obj: Vec::new(),
            p_attr: Vec::new(),
            object_tags: Vec::new(),
            attribute_tags: Vec::new(),
        };
        let inputs = PretrainInputs {
            captions: captions.iter().map(|c| c.as_slice()).collect(),
            scenes: lens.iter().map(|&n| SceneInput { scene: &scene, objects: vec![0; n], attributes: vec![0; n] }).collect(),
        };
        let plan = plan_masks(&inputs, v, p, &mut rng).unwrap();
        for (cap, m) in captions.iter().zip(&plan.captions) {
            prop_assert!(cap.iter().zip(m).all(|(&t, &k)| !(k && v.is_attribute(t))));
            let eligible = cap.iter().filter(|&&t| !v.is_attribute(t)).count();
            let masked = m.iter().filter(|&&k| k).count();
            if eligible > 0 {
                prop_assert!(masked >= 1);
            }
            if p == 1.0 {
                prop_assert_eq!(masked, eligible);
            }
        }
        for m in plan.tags.iter().chain(&plan.regions) {
            prop_assert!(m.iter().any(|&k| k));
        }
    }
}
