//! End-to-end runs: dictionary building, pre-training into a run directory
//! (with resume), fine-tuning, evaluation and the baseline comparison.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;

use crate::config::RunConfig;
use crate::corpus::{
    derived_rng, gen_corpus, gen_downstream_instance, Corpus, SceneSample, SplitKind, TaskInstance,
    TaskKind,
};
use crate::error::{Result, WvlpError};
use crate::model::{load_model, load_tensor_file, save_model, save_tensor_file, Model};
use crate::nnmath::{check_gradients, DenseArray, GradcheckConfig, GradcheckReport, Graph, Var};
use crate::objectives::{
    loss_csv_row, plan_masks, pretrain_forward, PretrainInputs, SceneInput, LOSS_CSV_HEADER,
};
use crate::tasks::{
    fourway_loss, recall_at_k, sample_fourway, score_matrix, task_accuracy, task_loss, RecallTable,
    RECALL_CSV_HEADER,
};
use crate::train::{
    check_finite, clip_global_norm, lr_at, pretrain_steps, AdamW, LrSchedule, PretrainContext,
    StepRecord, TrainConfig,
};
use crate::vocab::{build_dictionary, BuildReport, VisualDictionary};

pub const LOSSES_CSV: &str = "losses.csv";
pub const RECALL_CSV: &str = "recall.csv";
pub const ATTENTION_CSV: &str = "attention_mass.csv";
pub const SPECTRUM_CSV: &str = "spectrum.csv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const OPTIMIZER_CKPT: &str = "optimizer.ckpt";
pub const DICT_FILE: &str = "dict.wfhd";
pub const CORPUS_FILE: &str = "corpus.wvlc";

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

const DICT_STREAM: u64 = 23;
const INIT_STREAM: u64 = 29;
const FOURWAY_STREAM: u64 = 31;
const TASK_TRAIN_STREAM: u64 = 37;
const TASK_EVAL_STREAM: u64 = 41;
const GRADCHECK_STREAM: u64 = 47;

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| WvlpError::io(path, e))
}

/// All region features of a split stacked row-wise.
pub fn region_features(corpus: &Corpus, kind: SplitKind) -> Result<DenseArray<f32>> {
    let split = corpus.split(kind)?;
    let d = corpus.config.d_v;
    let mut vals = Vec::new();
    for s in &split.scenes {
        for r in &s.regions {
            vals.extend_from_slice(&r.feature);
        }
    }
    Ok(DenseArray::matrix(vals.len() / d, d, vals))
}

/// Learns the visual dictionary on the pre-training region features.
pub fn build_vocabulary(
    cfg: &RunConfig,
    corpus: &Corpus,
) -> Result<(VisualDictionary<f32>, BuildReport)> {
    let features = region_features(corpus, SplitKind::Pretrain)?;
    build_dictionary(
        &features,
        &cfg.dictionary,
        &mut derived_rng(cfg.seed, &[DICT_STREAM]),
    )
}

pub fn init_model(cfg: &RunConfig) -> Result<Model<f32>> {
    Model::new(
        cfg.model.clone(),
        &mut derived_rng(cfg.seed, &[INIT_STREAM]),
    )
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Run directory for losses, checkpoints and the echoed config.
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in `out` when there is one.
    pub resume: bool,
    /// Stop after this many updates in total (for interrupted runs).
    pub stop_at: Option<usize>,
}

fn read_step(text: &str) -> Option<usize> {
    text.lines()
        .find_map(|l| l.strip_prefix("step ")?.trim().parse().ok())
}

/// Keeps the header and the first `n` rows of an existing loss CSV.
fn truncated_losses(path: &Path, n: usize) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| WvlpError::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&LOSS_CSV_HEADER) || lines.len() < n + 1 {
        return Err(WvlpError::Contract(format!(
            "{} does not hold the {n} rows the checkpoint claims",
            path.display()
        )));
    }
    let mut out = lines[..=n].join("\n");
    out.push('\n');
    Ok(out)
}

fn save_checkpoint(dir: &Path, model: &Model<f32>, opt: &AdamW<f32>, csv: &str) -> Result<()> {
    save_model(model, &dir.join(MODEL_CKPT))?;
    save_tensor_file(&opt.to_file(&model.params), &dir.join(OPTIMIZER_CKPT))?;
    write_file(&dir.join(LOSSES_CSV), csv)
}

/// Pre-trains from scratch or from the checkpoint in the run directory.
/// Returns the model and the records of the updates run by this call.
pub fn run_pretraining(
    cfg: &RunConfig,
    corpus: &Corpus,
    dict: Option<&VisualDictionary<f32>>,
    opts: &PretrainOptions,
    mut progress: impl FnMut(&StepRecord),
) -> Result<(Model<f32>, Vec<StepRecord>)> {
    let total = cfg.pretrain.steps;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let mut model = init_model(cfg)?;
    let mut opt = AdamW::new(cfg.pretrain.optim.clone(), &model.params);
    let mut start = 0;
    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    if let Some(dir) = &opts.out {
        cfg.echo(dir)?;
        let (m, o) = (dir.join(MODEL_CKPT), dir.join(OPTIMIZER_CKPT));
        if opts.resume && m.exists() && o.exists() {
            let loaded = load_model(&m)?;
            if loaded.config != cfg.model {
                return Err(WvlpError::Config(
                    "checkpoint was written under a different model config".into(),
                ));
            }
            model = loaded;
            let file = load_tensor_file(&o)?;
            start = read_step(&file.text).ok_or_else(|| WvlpError::Manifest {
                path: o.clone(),
                detail: "missing step count".into(),
            })?;
            opt = AdamW::from_file(cfg.pretrain.optim.clone(), &model.params, &file)?;
            csv = truncated_losses(&dir.join(LOSSES_CSV), start)?;
        }
    }
    let ctx = PretrainContext {
        corpus,
        dict,
        objectives: &cfg.objectives,
        train: &cfg.pretrain,
        seed: cfg.seed,
    };
    let every = cfg.pretrain.checkpoint_every;
    let mut records = Vec::new();
    pretrain_steps(&mut model, &mut opt, &ctx, start, end, |r, m, o| {
        csv.push_str(&loss_csv_row(r.step, &r.losses, r.lr));
        csv.push('\n');
        records.push(*r);
        progress(r);
        if let Some(dir) = &opts.out {
            if r.step == end || (every > 0 && r.step % every == 0) {
                save_checkpoint(dir, m, o, &csv)?;
            }
        }
        Ok(())
    })?;
    if let (Some(dir), true) = (&opts.out, start >= end) {
        write_file(&dir.join(LOSSES_CSV), &csv)?;
    }
    Ok((model, records))
}

/// Generic fine-tuning loop: fresh optimizer, warmup/decay schedule,
/// clipping. `loss(g, model, step)` builds the batch loss of update `step`.
pub fn finetune_steps(
    model: &mut Model<f32>,
    train: &TrainConfig,
    mut loss: impl FnMut(&mut Graph<'_, f32>, &Model<f32>, usize) -> Result<Var>,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(train.optim.clone(), &model.params);
    let schedule = LrSchedule {
        total: train.steps,
        warmup_frac: train.optim.warmup_frac,
        peak: train.optim.lr,
    };
    let mut losses = Vec::with_capacity(train.steps);
    for s in 0..train.steps {
        let (value, mut grads) = {
            let mut g = Graph::new(&model.params);
            let l = loss(&mut g, model, s)?;
            (g.scalar(l), g.backward(l))
        };
        check_finite(&model.params, &grads)?;
        if train.optim.clip {
            clip_global_norm(&mut grads, train.optim.clip_norm);
        }
        opt.step(&mut model.params, &grads, lr_at(s + 1, &schedule)?)?;
        losses.push(value as f64);
        progress(s + 1, value as f64);
    }
    Ok(losses)
}

/// 4-way retrieval fine-tuning on the paired training split.
pub fn finetune_retrieval(
    cfg: &RunConfig,
    corpus: &Corpus,
    model: &mut Model<f32>,
    progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let split = corpus.split(SplitKind::FinetuneTrain)?;
    let pairing = split
        .pairing
        .as_ref()
        .ok_or_else(|| WvlpError::Contract("training split is unpaired".into()))?;
    let captions: Vec<&[u32]> = split.captions.iter().map(|c| c.tokens.as_slice()).collect();
    let scenes: Vec<&SceneSample> = pairing.iter().map(|&s| &split.scenes[s as usize]).collect();
    let n = captions.len();
    let k = cfg.finetune.train.batch_size.min(n);
    finetune_steps(
        model,
        &cfg.finetune.train,
        |g, m, s| {
            let mut rng = derived_rng(cfg.seed, &[FOURWAY_STREAM, s as u64]);
            let instances = sample(&mut rng, n, k)
                .into_iter()
                .map(|a| sample_fourway(a, n, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            fourway_loss(g, m, &instances, &captions, &scenes)
        },
        progress,
    )
}

fn task_items(
    corpus: &Corpus,
    kind: TaskKind,
    split: SplitKind,
    seed: u64,
    stream: &[u64],
    count: Option<usize>,
) -> Result<Vec<(TaskInstance, usize)>> {
    let scenes = &corpus.split(split)?.scenes;
    let picks: Vec<usize> = match count {
        Some(k) => sample(
            &mut derived_rng(seed, stream),
            scenes.len(),
            k.min(scenes.len()),
        )
        .into_vec(),
        None => (0..scenes.len()).collect(),
    };
    picks
        .into_iter()
        .map(|i| {
            let mut parts = stream.to_vec();
            parts.push(i as u64);
            let inst = gen_downstream_instance(
                kind,
                &scenes[i],
                &corpus.world,
                &mut derived_rng(seed, &parts),
            )?;
            Ok((inst, i))
        })
        .collect()
}

/// Fine-tunes the VQA, VE or REC head on instances drawn from training
/// scenes.
pub fn finetune_task(
    cfg: &RunConfig,
    corpus: &Corpus,
    model: &mut Model<f32>,
    kind: TaskKind,
    progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let scenes = &corpus.split(SplitKind::FinetuneTrain)?.scenes;
    let bs = cfg.finetune.train.batch_size;
    finetune_steps(
        model,
        &cfg.finetune.train,
        |g, m, s| {
            let items = task_items(
                corpus,
                kind,
                SplitKind::FinetuneTrain,
                cfg.seed,
                &[TASK_TRAIN_STREAM, s as u64],
                Some(bs),
            )?;
            let refs: Vec<_> = items.iter().map(|(i, sc)| (i, &scenes[*sc])).collect();
            task_loss(g, m, kind, &refs)
        },
        progress,
    )
}

/// Accuracy on one instance per test scene.
pub fn evaluate_task(
    cfg: &RunConfig,
    corpus: &Corpus,
    model: &Model<f32>,
    kind: TaskKind,
) -> Result<f64> {
    let scenes = &corpus.split(SplitKind::FinetuneTest)?.scenes;
    let items = task_items(
        corpus,
        kind,
        SplitKind::FinetuneTest,
        cfg.seed,
        &[TASK_EVAL_STREAM],
        None,
    )?;
    let refs: Vec<_> = items.iter().map(|(i, sc)| (i, &scenes[*sc])).collect();
    task_accuracy(model, kind, &refs, cfg.finetune.eval_chunk)
}

/// Recall@{1,5,10} over the first `n` pairs of a paired split.
pub fn evaluate_retrieval(
    model: &Model<f32>,
    corpus: &Corpus,
    kind: SplitKind,
    n: usize,
    chunk: usize,
) -> Result<RecallTable> {
    let split = corpus.split(kind)?;
    let pairing = split
        .pairing
        .as_ref()
        .ok_or_else(|| WvlpError::Contract(format!("{} split is unpaired", kind.label())))?;
    let n = n.min(split.captions.len());
    if n == 0 {
        return Err(WvlpError::Empty("no pairs to evaluate".into()));
    }
    let captions: Vec<&[u32]> = split.captions[..n]
        .iter()
        .map(|c| c.tokens.as_slice())
        .collect();
    let scenes: Vec<&SceneSample> = pairing[..n]
        .iter()
        .map(|&s| &split.scenes[s as usize])
        .collect();
    let scores = score_matrix(model, &captions, &scenes, chunk)?;
    recall_at_k(&scores, &(0..n).collect::<Vec<_>>(), &RECALL_KS)
}

/// In-domain test split next to the attribute-shifted domain.
pub fn cross_domain_eval(
    cfg: &RunConfig,
    corpus: &Corpus,
    model: &Model<f32>,
) -> Result<Vec<(SplitKind, RecallTable)>> {
    [SplitKind::FinetuneTest, SplitKind::Shifted]
        .into_iter()
        .map(|k| {
            Ok((
                k,
                evaluate_retrieval(
                    model,
                    corpus,
                    k,
                    cfg.finetune.eval_pairs,
                    cfg.finetune.eval_chunk,
                )?,
            ))
        })
        .collect()
}

pub fn recall_csv(tables: &[(SplitKind, RecallTable)]) -> String {
    let mut out = format!("{RECALL_CSV_HEADER}\n");
    for (k, t) in tables {
        let domain = if *k == SplitKind::Shifted {
            "shifted"
        } else {
            "in-domain"
        };
        for row in t.csv_rows(k.label(), domain) {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

/// Config with every seed (run and corpus) set to `seed`.
pub fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.corpus.seed = seed;
    c
}

/// Pre-trains, fine-tunes for retrieval and evaluates one configuration.
pub fn retrieval_experiment(
    cfg: &RunConfig,
    corpus: &Corpus,
    log: &mut dyn FnMut(&str),
) -> Result<RecallTable> {
    let dict = if cfg.model.hallucinator {
        Some(build_vocabulary(cfg, corpus)?.0)
    } else {
        None
    };
    let every = (cfg.pretrain.steps / 10).max(1);
    let (mut model, _) = run_pretraining(
        cfg,
        corpus,
        dict.as_ref(),
        &PretrainOptions::default(),
        |r| {
            if r.step % every == 0 {
                log(&format!(
                    "  pretrain {}/{} loss {:.4}",
                    r.step, cfg.pretrain.steps, r.losses.total
                ));
            }
        },
    )?;
    let fevery = (cfg.finetune.train.steps / 5).max(1);
    finetune_retrieval(cfg, corpus, &mut model, |s, l| {
        if s % fevery == 0 {
            log(&format!(
                "  finetune {s}/{} loss {l:.4}",
                cfg.finetune.train.steps
            ));
        }
    })?;
    evaluate_retrieval(
        &model,
        corpus,
        SplitKind::FinetuneTest,
        cfg.finetune.eval_pairs,
        cfg.finetune.eval_chunk,
    )
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub seed: u64,
    pub baseline: RecallTable,
    pub full: RecallTable,
}

/// Baseline and full configurations under shared seeds.
pub fn compare(
    cfg: &RunConfig,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let full = with_seed(cfg, seed);
        let base = full.baseline();
        let corpus = gen_corpus(&full.corpus)?;
        log(&format!("seed {seed}: baseline"));
        let b = retrieval_experiment(&base, &corpus, log)?;
        log(&format!("seed {seed}: full"));
        let f = retrieval_experiment(&full, &corpus, log)?;
        rows.push(CompareRow {
            seed,
            baseline: b,
            full: f,
        });
    }
    Ok(rows)
}

pub const COMPARE_CSV_HEADER: &str = "seed,direction,K,baseline,full,delta";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_CSV_HEADER}\n");
    for r in rows {
        for (dir, b, f) in [
            ("TR", &r.baseline.tr, &r.full.tr),
            ("IR", &r.baseline.ir, &r.full.ir),
        ] {
            for (i, k) in r.baseline.ks.iter().enumerate() {
                out.push_str(&format!(
                    "{},{dir},{k},{},{},{}\n",
                    r.seed,
                    b[i],
                    f[i],
                    f[i] - b[i]
                ));
            }
        }
    }
    out
}

/// Median over seeds of the R@1 margin (full − baseline), TR and IR.
pub fn median_r1_margin(rows: &[CompareRow]) -> (f64, f64) {
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    let tr = rows
        .iter()
        .map(|r| r.full.r1().0 - r.baseline.r1().0)
        .collect();
    let ir = rows
        .iter()
        .map(|r| r.full.r1().1 - r.baseline.r1().1)
        .collect();
    (median(tr), median(ir))
}

/// Finite-difference check of the full pre-training loss in 64-bit mode on
/// the first `batch` pre-training captions and scenes.
pub fn pretrain_gradcheck(
    cfg: &RunConfig,
    batch: usize,
    gc: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let corpus = gen_corpus(&cfg.corpus)?;
    let dict = if cfg.model.hallucinator {
        Some(build_vocabulary(cfg, &corpus)?.0.cast::<f64>())
    } else {
        None
    };
    let split = corpus.split(SplitKind::Pretrain)?;
    let n = batch.min(split.captions.len()).min(split.scenes.len());
    let inputs = PretrainInputs {
        captions: split.captions[..n]
            .iter()
            .map(|c| c.tokens.as_slice())
            .collect(),
        scenes: split.scenes[..n]
            .iter()
            .map(|s| SceneInput {
                scene: s,
                objects: s.object_tags.clone(),
                attributes: s.attribute_tags.clone(),
            })
            .collect(),
    };
    let vocab = &corpus.world.vocab;
    let plan = plan_masks(
        &inputs,
        vocab,
        cfg.objectives.mask_prob,
        &mut derived_rng(cfg.seed, &[GRADCHECK_STREAM]),
    )?;
    let mut model = init_model(cfg)?.cast::<f64>();
    {
        // surface input errors here; perturbed parameters cannot change them
        let mut g = Graph::new(&model.params);
        pretrain_forward(
            &mut g,
            &model,
            dict.as_ref(),
            vocab,
            &inputs,
            &plan,
            &cfg.objectives,
        )?;
    }
    let mut params = std::mem::take(&mut model.params);
    check_gradients(
        &mut params,
        |p| {
            let mut g = Graph::new(p);
            let out = pretrain_forward(
                &mut g,
                &model,
                dict.as_ref(),
                vocab,
                &inputs,
                &plan,
                &cfg.objectives,
            )
            .expect("forward validated above");
            (g.scalar(out.total), g.backward(out.total))
        },
        gc,
    )
}
