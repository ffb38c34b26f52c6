use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wvlp::analysis::{attention_mass, embedding_spectrum};
use wvlp::config::RunConfig;
use wvlp::corpus::{
    gen_corpus, load_corpus, save_corpus, Corpus, SceneSample, SplitKind, TaskKind,
};
use wvlp::model::{load_model, save_model, Model};
use wvlp::nnmath::GradcheckConfig;
use wvlp::pipeline::{
    build_vocabulary, compare, compare_csv, cross_domain_eval, evaluate_task, finetune_retrieval,
    finetune_task, median_r1_margin, pretrain_gradcheck, recall_csv, run_pretraining, with_seed,
    PretrainOptions, ATTENTION_CSV, CORPUS_FILE, DICT_FILE, MODEL_CKPT, RECALL_CSV, SPECTRUM_CSV,
};
use wvlp::vocab::{load_dictionary, save_dictionary};
use wvlp::WvlpError;

#[derive(Parser)]
#[command(
    name = "wvlp",
    about = "Weakly-supervised vision-language pre-training on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset (micro, desk, bench, paper) used when no config is given.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the run and corpus seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Retrieval,
    Vqa,
    Ve,
    Rec,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the visual dictionary on pre-training region features.
    VocabBuild {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on unpaired captions and scenes.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Dictionary file (required unless the hallucinator is off).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Baseline variant: no hallucinator and no attribute tags.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        disable_attributes: bool,
        #[arg(long)]
        disable_hallucinator: bool,
    },
    /// Fine-tune a pre-trained checkpoint on one downstream task.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Recall@K on the in-domain test split and the shifted domain.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        /// Fail (exit 4) when in-domain R@1 is below this in either direction.
        #[arg(long = "assert", value_name = "MIN_R1")]
        assert_r1: Option<f64>,
    },
    /// Attention mass by modality and the token-embedding spectrum.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        scenes: usize,
    },
    /// Finite-difference check of the full pre-training loss.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Baseline vs full configuration under shared seeds.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds to run (comma separated); `--seed` runs a single one.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Fail (exit 4) unless the median R@1 margin reaches this in both directions.
        #[arg(long = "assert", value_name = "MIN_MARGIN")]
        assert_margin: Option<f64>,
    },
}

enum Failure {
    Lib(WvlpError),
    Assertion(String),
}

impl From<WvlpError> for Failure {
    fn from(e: WvlpError) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Lib(WvlpError::Config(_)) => 2,
        Failure::Lib(WvlpError::Io { .. }) => 3,
        Failure::Assertion(_) => 4,
        Failure::Lib(_) => 1,
    }
}

fn load_config(a: &ConfigArgs, default_preset: &str) -> CliResult<RunConfig> {
    let mut c = match (&a.config, &a.preset) {
        (Some(_), Some(_)) => {
            return Err(
                WvlpError::Config("pass either --config or --preset, not both".into()).into(),
            )
        }
        (Some(p), None) => RunConfig::load(p)?,
        (None, p) => RunConfig::preset(p.as_deref().unwrap_or(default_preset))?,
    };
    if let Some(s) = a.seed {
        c = with_seed(&c, s);
    }
    Ok(c)
}

/// Adopts the sizes of a corpus read from disk.
fn with_corpus(mut c: RunConfig, corpus: &Corpus) -> CliResult<RunConfig> {
    c.corpus = corpus.config.clone();
    c.resolve();
    c.validate()?;
    Ok(c)
}

fn with_model(mut c: RunConfig, model: &Model<f32>) -> RunConfig {
    c.model = model.config.clone();
    c
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| WvlpError::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn mkdir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| WvlpError::Io {
        path: dir.into(),
        source: e,
    })?;
    Ok(())
}

fn task_kind(t: Task) -> Option<TaskKind> {
    match t {
        Task::Retrieval => None,
        Task::Vqa => Some(TaskKind::Vqa),
        Task::Ve => Some(TaskKind::Ve),
        Task::Rec => Some(TaskKind::Rec),
    }
}

fn print_recall(tables: &[(SplitKind, wvlp::tasks::RecallTable)]) {
    for (k, t) in tables {
        let cells: Vec<String> =
            t.ks.iter()
                .enumerate()
                .map(|(i, k)| format!("R@{k} TR {:.1} IR {:.1}", t.tr[i], t.ir[i]))
                .collect();
        println!("{:<15} {}", k.label(), cells.join("  "));
    }
}

fn run(cli: Cli) -> CliResult {
    let t0 = Instant::now();
    match cli.command {
        Command::GenCorpus { cfg, out } => {
            let c = load_config(&cfg, "desk")?;
            mkdir(&out)?;
            let corpus = gen_corpus(&c.corpus)?;
            save_corpus(&corpus, &out.join(CORPUS_FILE))?;
            c.echo(&out)?;
            for s in &corpus.splits {
                println!(
                    "{:<15} {} scenes, {} captions",
                    s.kind.label(),
                    s.scenes.len(),
                    s.captions.len()
                );
            }
        }
        Command::VocabBuild { cfg, corpus, out } => {
            let corpus = load_corpus(&corpus)?;
            let c = with_corpus(load_config(&cfg, "desk")?, &corpus)?;
            mkdir(&out)?;
            let (dict, report) = build_vocabulary(&c, &corpus)?;
            save_dictionary(&dict, &out.join(DICT_FILE))?;
            c.echo(&out)?;
            println!("dictionary: {} entries of width {}", dict.len(), dict.d_v());
            println!("quantization error: init {:.5}", report.init_error);
            for (i, e) in report.epoch_errors.iter().enumerate() {
                println!("  epoch {:>3} {e:.5}", i + 1);
            }
        }
        Command::Pretrain {
            cfg,
            corpus,
            vocab,
            out,
            steps,
            batch_size,
            checkpoint_every,
            resume,
            baseline,
            disable_attributes,
            disable_hallucinator,
        } => {
            let corpus = load_corpus(&corpus)?;
            let mut c = load_config(&cfg, "desk")?;
            if baseline {
                c = c.baseline();
            }
            c.model.attributes &= !disable_attributes;
            c.model.hallucinator &= !disable_hallucinator;
            if let Some(s) = steps {
                c.pretrain.steps = s;
            }
            if let Some(b) = batch_size {
                c.pretrain.batch_size = b;
            }
            if let Some(e) = checkpoint_every {
                c.pretrain.checkpoint_every = e;
            }
            let c = with_corpus(c, &corpus)?;
            let dict = match (c.model.hallucinator, vocab) {
                (true, Some(p)) => Some(load_dictionary(&p)?),
                (true, None) => {
                    return Err(WvlpError::Config(
                        "the hallucinator needs --vocab (or pass --baseline)".into(),
                    )
                    .into())
                }
                (false, _) => None,
            };
            mkdir(&out)?;
            let total = c.pretrain.steps;
            let every = (total / 20).max(1);
            let opts = PretrainOptions {
                out: Some(out.clone()),
                resume,
                stop_at: None,
            };
            run_pretraining(&c, &corpus, dict.as_ref(), &opts, |r| {
                if r.step % every == 0 || r.step == total {
                    let l = &r.losses;
                    eprintln!(
                        "step {:>6}/{total}  mlm {:.4}  mtc {:.4}  moc {:.4}  wfh {:.4}  total {:.4}  lr {:.2e}  [{:.0}s]",
                        r.step,
                        l.mlm,
                        l.mtc,
                        l.moc,
                        l.wfh,
                        l.total,
                        r.lr,
                        t0.elapsed().as_secs_f64()
                    );
                }
            })?;
            println!("wrote {}", out.join(MODEL_CKPT).display());
        }
        Command::Finetune {
            cfg,
            task,
            ckpt,
            corpus,
            out,
            steps,
        } => {
            let corpus = load_corpus(&corpus)?;
            let mut model = load_model(&ckpt)?;
            let mut c = with_model(with_corpus(load_config(&cfg, "desk")?, &corpus)?, &model);
            if let Some(s) = steps {
                c.finetune.train.steps = s;
            }
            c.validate()?;
            mkdir(&out)?;
            c.echo(&out)?;
            let total = c.finetune.train.steps;
            let every = (total / 10).max(1);
            let progress = |s: usize, l: f64| {
                if s.is_multiple_of(every) || s == total {
                    eprintln!(
                        "step {s:>5}/{total}  loss {l:.4}  [{:.0}s]",
                        t0.elapsed().as_secs_f64()
                    );
                }
            };
            match task_kind(task) {
                None => {
                    finetune_retrieval(&c, &corpus, &mut model, progress)?;
                    let tables = cross_domain_eval(&c, &corpus, &model)?;
                    write(&out.join(RECALL_CSV), &recall_csv(&tables))?;
                    print_recall(&tables);
                }
                Some(kind) => {
                    finetune_task(&c, &corpus, &mut model, kind, progress)?;
                    let acc = evaluate_task(&c, &corpus, &model, kind)?;
                    write(
                        &out.join("metrics.csv"),
                        &format!("task,accuracy\n{kind:?},{acc}\n"),
                    )?;
                    println!("{kind:?} accuracy {acc:.4}");
                }
            }
            save_model(&model, &out.join(MODEL_CKPT))?;
        }
        Command::Eval {
            cfg,
            ckpt,
            corpus,
            out,
            pairs,
            assert_r1,
        } => {
            let corpus = load_corpus(&corpus)?;
            let model = load_model(&ckpt)?;
            let mut c = with_model(with_corpus(load_config(&cfg, "desk")?, &corpus)?, &model);
            if let Some(n) = pairs {
                c.finetune.eval_pairs = n;
            }
            mkdir(&out)?;
            c.echo(&out)?;
            let tables = cross_domain_eval(&c, &corpus, &model)?;
            write(&out.join(RECALL_CSV), &recall_csv(&tables))?;
            print_recall(&tables);
            if let Some(min) = assert_r1 {
                let (tr, ir) = tables[0].1.r1();
                if tr < min || ir < min {
                    return Err(Failure::Assertion(format!(
                        "R@1 TR {tr:.1} / IR {ir:.1} below {min}"
                    )));
                }
            }
        }
        Command::Analyze {
            cfg,
            ckpt,
            corpus,
            out_dir,
            scenes,
        } => {
            let corpus = load_corpus(&corpus)?;
            let model = load_model(&ckpt)?;
            let c = with_model(with_corpus(load_config(&cfg, "desk")?, &corpus)?, &model);
            mkdir(&out_dir)?;
            c.echo(&out_dir)?;
            let split = corpus.split(SplitKind::FinetuneTest)?;
            let picked: Vec<&SceneSample> = split.scenes.iter().take(scenes.max(1)).collect();
            let mass = attention_mass(&model, &corpus.world, &picked, c.seed)?;
            write(&out_dir.join(ATTENTION_CSV), &mass.csv())?;
            let spectrum = embedding_spectrum(&model)?;
            write(&out_dir.join(SPECTRUM_CSV), &spectrum.csv())?;
            println!("layer  img_self img2tag img2start tag_self tag2img tag2start");
            for (l, m) in mass.layers.iter().enumerate() {
                println!(
                    "{l:>5}  {:.4}   {:.4}  {:.4}    {:.4}   {:.4}  {:.4}",
                    m[0], m[1], m[2], m[3], m[4], m[5]
                );
            }
            println!(
                "spectrum: {} values, largest {:.4}, smallest {:.4}",
                spectrum.values.len(),
                spectrum.values[0],
                spectrum.values[spectrum.values.len() - 1]
            );
        }
        Command::Gradcheck {
            cfg,
            batch,
            tolerance,
        } => {
            let c = load_config(&cfg, "micro")?;
            let report =
                pretrain_gradcheck(&c, batch, &GradcheckConfig::with_tolerance(tolerance))?;
            println!(
                "checked {} coordinates, max relative error {:.3e} (tolerance {tolerance:e})",
                report.checked, report.max_rel_error
            );
            if !report.passed {
                for w in &report.worst {
                    println!("  {w:?}");
                }
                return Err(Failure::Assertion("gradient check failed".into()));
            }
        }
        Command::Compare {
            cfg,
            seeds,
            out,
            assert_margin,
        } => {
            let c = load_config(&cfg, "bench")?;
            let seeds = match cfg.seed {
                Some(s) => vec![s],
                None => seeds,
            };
            mkdir(&out)?;
            c.echo(&out)?;
            let rows = compare(&c, &seeds, &mut |m| {
                eprintln!("{m}  [{:.0}s]", t0.elapsed().as_secs_f64())
            })?;
            let csv = compare_csv(&rows);
            write(&out.join("compare.csv"), &csv)?;
            let mut recall = String::from("variant,seed,direction,K,recall\n");
            for r in &rows {
                for (name, t) in [("baseline", &r.baseline), ("full", &r.full)] {
                    for (dir, v) in [("TR", &t.tr), ("IR", &t.ir)] {
                        for (k, x) in t.ks.iter().zip(v) {
                            recall.push_str(&format!("{name},{},{dir},{k},{x}\n", r.seed));
                        }
                    }
                }
            }
            write(&out.join(RECALL_CSV), &recall)?;
            print!("{csv}");
            let (tr, ir) = median_r1_margin(&rows);
            println!("median R@1 margin: TR {tr:+.1}  IR {ir:+.1}");
            if let Some(min) = assert_margin {
                if tr < min || ir < min {
                    return Err(Failure::Assertion(format!("median R@1 margin below {min}")));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Assertion(m) => eprintln!("assertion failed: {m}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
