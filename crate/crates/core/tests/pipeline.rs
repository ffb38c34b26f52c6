use std::fs;

use wvlp::config::{RunConfig, CONFIG_FILE};
use wvlp::corpus::{gen_corpus, SplitKind, TaskKind};
use wvlp::objectives::LOSS_CSV_HEADER;
use wvlp::pipeline::{
    build_vocabulary, compare_csv, cross_domain_eval, evaluate_retrieval, evaluate_task,
    finetune_retrieval, finetune_task, init_model, median_r1_margin, recall_csv, run_pretraining,
    CompareRow, PretrainOptions, LOSSES_CSV, MODEL_CKPT, OPTIMIZER_CKPT,
};
use wvlp::tasks::RecallTable;
use wvlp::vocab::{load_dictionary, save_dictionary};

fn micro() -> RunConfig {
    RunConfig::preset("micro").unwrap()
}

#[test]
fn two_step_run_writes_two_rows_and_echoes_config() {
    let cfg = micro();
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let (dict, _) = build_vocabulary(&cfg, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        out: Some(dir.path().to_path_buf()),
        ..PretrainOptions::default()
    };
    let (_, recs) = run_pretraining(&cfg, &corpus, Some(&dict), &opts, |_| {}).unwrap();
    assert_eq!(recs.len(), 2);
    let csv = fs::read_to_string(dir.path().join(LOSSES_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOSS_CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    assert!(dir.path().join(MODEL_CKPT).exists() && dir.path().join(OPTIMIZER_CKPT).exists());
    let echoed = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn dictionary_file_untouched_by_training() {
    let mut cfg = micro();
    cfg.pretrain.steps = 4;
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let (dict, _) = build_vocabulary(&cfg, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.wfhd");
    save_dictionary(&dict, &path).unwrap();
    let before = fs::read(&path).unwrap();
    let loaded = load_dictionary(&path).unwrap();
    run_pretraining(
        &cfg,
        &corpus,
        Some(&loaded),
        &PretrainOptions::default(),
        |_| {},
    )
    .unwrap();
    assert_eq!(fs::read(&path).unwrap(), before);
    assert_eq!(loaded.entries, dict.entries);
}

#[test]
fn resume_after_finish_is_a_no_op() {
    let mut cfg = micro();
    cfg.pretrain.steps = 3;
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let (dict, _) = build_vocabulary(&cfg, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        out: Some(dir.path().to_path_buf()),
        resume: true,
        stop_at: None,
    };
    let (a, _) = run_pretraining(&cfg, &corpus, Some(&dict), &opts, |_| {}).unwrap();
    let csv = fs::read(dir.path().join(LOSSES_CSV)).unwrap();
    let (b, recs) = run_pretraining(&cfg, &corpus, Some(&dict), &opts, |_| {}).unwrap();
    assert!(recs.is_empty());
    assert_eq!(a.tensors(), b.tensors());
    assert_eq!(fs::read(dir.path().join(LOSSES_CSV)).unwrap(), csv);
}

#[test]
fn resume_rejects_a_different_model() {
    let cfg = micro();
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let (dict, _) = build_vocabulary(&cfg, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        out: Some(dir.path().to_path_buf()),
        resume: true,
        stop_at: None,
    };
    run_pretraining(&cfg, &corpus, Some(&dict), &opts, |_| {}).unwrap();
    let mut other = cfg.clone();
    other.model.gamma = 8.0;
    assert!(run_pretraining(&other, &corpus, Some(&dict), &opts, |_| {}).is_err());
}

#[test]
fn cross_domain_table_shape_and_identical_domains() {
    let cfg = micro();
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let model = init_model(&cfg).unwrap();
    let tables = cross_domain_eval(&cfg, &corpus, &model).unwrap();
    assert_eq!(tables.len(), 2);
    let csv = recall_csv(&tables);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    for dir in ["TR", "IR"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(dir)).count(), 6);
    }
    assert!(rows.iter().any(|r| r.ends_with(",shifted")));
    let a = evaluate_retrieval(&model, &corpus, SplitKind::FinetuneTest, 8, 3).unwrap();
    let b = evaluate_retrieval(&model, &corpus, SplitKind::FinetuneTest, 8, 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, tables[0].1);
}

#[test]
fn retrieval_finetune_reduces_loss() {
    let mut cfg = micro();
    cfg.finetune.train.steps = 60;
    cfg.finetune.train.batch_size = 4;
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let mut model = init_model(&cfg).unwrap();
    let losses = finetune_retrieval(&cfg, &corpus, &mut model, |_, _| {}).unwrap();
    assert_eq!(losses.len(), 60);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

/// From scratch the loss sits at ln 2 for a few thousand updates before the
/// attribute-object binding is found, hence the long schedule.
#[test]
fn vqa_learns_zero_noise_corpus() {
    let mut cfg = RunConfig::preset("bench").unwrap();
    cfg.corpus.noise_sigma = 0.0;
    cfg.corpus.finetune_test = 100;
    cfg.finetune.train.steps = 10_000;
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let mut model = init_model(&cfg).unwrap();
    finetune_task(&cfg, &corpus, &mut model, TaskKind::Vqa, |_, _| {}).unwrap();
    let acc = evaluate_task(&cfg, &corpus, &model, TaskKind::Vqa).unwrap();
    assert!(acc > 0.9, "VQA accuracy {acc}");
}

#[test]
fn compare_csv_and_median_margin() {
    let table = |tr: f64, ir: f64| RecallTable {
        ks: vec![1, 5],
        tr: vec![tr, 50.0],
        ir: vec![ir, 50.0],
    };
    let rows: Vec<CompareRow> = [(1, 10.0, 20.0), (2, 30.0, 31.0), (3, 5.0, 12.0)]
        .into_iter()
        .map(|(seed, b, f)| CompareRow {
            seed,
            baseline: table(b, b),
            full: table(f, f - 1.0),
        })
        .collect();
    assert_eq!(median_r1_margin(&rows), (7.0, 6.0));
    let csv = compare_csv(&rows);
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert!(csv.contains("1,TR,1,10,20,10\n"));
    assert!(csv.contains("3,IR,5,50,50,0\n"));
}
