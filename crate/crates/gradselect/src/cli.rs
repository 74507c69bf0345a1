//! Command-line interface: thin wrappers over the library operations,
//! driven by a structured TOML config. Exit codes: 0 success, 1 usage,
//! 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    augmentation_quality, gradient_interval_ablation, sentence_deletion_study, Backend,
};
use crate::config::PipelineConfig;
use crate::corpus::{
    load_items, load_queries, read_gold_map, read_item_texts, read_query_texts, write_run,
    RankedList, TrainingSet, Vocab,
};
use crate::encoder::{
    init_params, load_checkpoint, retrieve, save_checkpoint, train, EncodedCorpus,
};
use crate::error::{Error, Result};
use crate::gradaug::{NoiseKind, Selector};
use crate::itemaug::{
    build_augmented_pairs, ensemble_retrieve, extend_training_set, train_student, write_pairs_file,
};
use crate::lexical::{bm25_build, bm25_rank};
use crate::metrics::evaluate_run_file;
use crate::pipeline::{prepare_data, run_grid, run_pipeline};

#[derive(Parser)]
#[command(
    name = "gradselect",
    version,
    about = "Gradient-selected augmentation for desk-scale known-item retrieval"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override data.topn.
    #[arg(long)]
    topn: Option<usize>,
    /// Override augment.m.
    #[arg(long)]
    m: Option<f64>,
    /// Override augment.n.
    #[arg(long)]
    n: Option<f64>,
    /// Override augment.alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override augment.beta.
    #[arg(long)]
    beta: Option<f64>,
    /// Override augment.selector (grad_band|random|large_loss|small_loss).
    #[arg(long)]
    selector: Option<String>,
    /// Override augment.noise (delete|replace).
    #[arg(long)]
    noise: Option<String>,
    /// Disable circumlocution augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Disable target-item augmentation.
    #[arg(long)]
    no_itemaug: bool,
    /// Override itemaug.k.
    #[arg(long)]
    k: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        use crate::config::ScalarOrList;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(topn) = self.topn {
            cfg.data.topn = topn;
        }
        if let Some(m) = self.m {
            cfg.augment.m = ScalarOrList::Scalar(m);
        }
        if let Some(n) = self.n {
            cfg.augment.n = ScalarOrList::Scalar(n);
        }
        if let Some(alpha) = self.alpha {
            cfg.augment.alpha = ScalarOrList::Scalar(alpha);
        }
        if let Some(beta) = self.beta {
            cfg.augment.beta = ScalarOrList::Scalar(beta);
        }
        if let Some(s) = &self.selector {
            cfg.augment.selector = match s.as_str() {
                "grad_band" => Selector::GradBand,
                "random" => Selector::Random,
                "large_loss" => Selector::LargeLoss,
                "small_loss" => Selector::SmallLoss,
                other => return Err(Error::Config(format!("unknown selector `{other}`"))),
            };
        }
        if let Some(nk) = &self.noise {
            cfg.augment.noise = match nk.as_str() {
                "delete" => NoiseKind::Delete,
                "replace" => NoiseKind::Replace,
                other => return Err(Error::Config(format!("unknown noise kind `{other}`"))),
            };
        }
        if self.no_augment {
            cfg.augment.enabled = false;
        }
        if self.no_itemaug {
            cfg.itemaug.enabled = false;
        }
        if let Some(k) = self.k {
            cfg.itemaug.k = k;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate and summarize a data set; writes the vocabulary.
    Ingest {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long, default_value_t = 32)]
        segment_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic benchmark from the [synth] config section.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override synth.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the teacher model; writes teacher.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Build rank-gated pseudo-positives and train the student.
    Itemaug {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint (teacher.json from `train`).
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rank queries against a corpus and emit a run file.
    Retrieve {
        /// Dense checkpoint; omit together with --bm25 for lexical runs.
        #[arg(long, conflicts_with = "bm25")]
        checkpoint: Option<PathBuf>,
        /// Second checkpoint: ensemble the two models.
        #[arg(long, requires = "checkpoint")]
        checkpoint2: Option<PathBuf>,
        /// Use the BM25 baseline instead of a dense model.
        #[arg(long)]
        bm25: bool,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        topn: usize,
        #[arg(long, default_value = "gradselect")]
        tag: String,
    },
    /// Score a run file against query golds.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Also write the machine-readable report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sentence-deletion pilot study.
    Pilot {
        #[arg(long)]
        config: PathBuf,
        /// Dense checkpoint; omit together with --bm25.
        #[arg(long, conflicts_with = "bm25")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bm25: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient-interval ablation (five intervals, retrain per interval).
    IntervalAblation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Augmentation relevance/diversity measures.
    AugQuality {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Full pipeline: teacher, item augmentation, student, ensemble,
    /// metrics. Expands hyperparameter grids into subdirectories.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invalid(format!("cannot serialize report: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Ingest {
            items,
            queries,
            min_count,
            segment_len,
            out,
        } => {
            let mut texts = read_item_texts(&items)?;
            texts.extend(read_query_texts(&queries)?);
            let vocab = Vocab::build(texts.iter().map(String::as_str), min_count)?;
            let store = load_items(&items, &vocab, segment_len)?;
            let qs = load_queries(&queries, &vocab)?;
            TrainingSet::from_gold(&qs, &store)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let vocab_path = out.join("vocab.json");
            write_json(&vocab_path, &vocab)?;
            println!(
                "items {} queries {} vocab {} (written to {})",
                store.len(),
                qs.len(),
                vocab.len(),
                vocab_path.display()
            );
        }
        Cmd::Synth { config, out, seed } => {
            let mut synth_cfg = match config {
                Some(path) => PipelineConfig::load(&path)?
                    .synth
                    .ok_or_else(|| Error::Config("config has no [synth] section".into()))?,
                None => crate::synthbench::SynthConfig::default(),
            };
            if let Some(seed) = seed {
                synth_cfg.seed = seed;
            }
            let data = crate::synthbench::generate(&synth_cfg)?;
            let files = crate::synthbench::write_files(&data, &out)?;
            println!(
                "items {} train queries {} eval queries {} -> {}",
                data.items.len(),
                data.train_queries.len(),
                data.eval_queries.len(),
                files.items.parent().unwrap().display()
            );
        }
        Cmd::Train {
            config,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let data = prepare_data(&cfg, &out)?;
            let tset = TrainingSet::from_gold(&data.train_queries, &data.items)?;
            let start = init_params(&cfg.model_config(), &data.vocab)?;
            let augment = cfg.augment_config();
            let model = train(&start, &tset, &data.train_queries, &data.items, augment.as_ref())?;
            let path = out.join("teacher.json");
            save_checkpoint(&model, &path)?;
            println!("trained on {} pairs -> {}", tset.len(), path.display());
        }
        Cmd::Itemaug {
            config,
            teacher,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let data = prepare_data(&cfg, &out)?;
            let tset = TrainingSet::from_gold(&data.train_queries, &data.items)?;
            let teacher = load_checkpoint(&teacher)?;
            let itemaug_cfg = cfg
                .itemaug_config()
                .ok_or_else(|| Error::Config("itemaug is disabled in this config".into()))?;
            let pairs =
                build_augmented_pairs(&teacher, &tset, &data.train_queries, &data.items, &itemaug_cfg)?;
            let tp_path = out.join("tprime.jsonl");
            write_pairs_file(&tp_path, &pairs)?;
            let combined = extend_training_set(&tset, &pairs, &data.train_queries, &data.items)?;
            let augment = cfg.augment_config();
            let student = train_student(
                &teacher,
                &combined,
                &data.train_queries,
                &data.items,
                augment.as_ref(),
            )?;
            let st_path = out.join("student.json");
            save_checkpoint(&student, &st_path)?;
            println!(
                "gated pairs {} -> {}; student -> {}",
                pairs.len(),
                tp_path.display(),
                st_path.display()
            );
        }
        Cmd::Retrieve {
            checkpoint,
            checkpoint2,
            bm25,
            items,
            queries,
            out,
            topn,
            tag,
        } => {
            let rankings: Vec<RankedList> = if bm25 {
                let mut texts = read_item_texts(&items)?;
                texts.extend(read_query_texts(&queries)?);
                let vocab = Vocab::build(texts.iter().map(String::as_str), 1)?;
                let store = load_items(&items, &vocab, 32)?;
                let qs = load_queries(&queries, &vocab)?;
                let index = bm25_build(&store, 1.2, 0.75)?;
                qs.iter().map(|q| bm25_rank(&index, &store, q, topn)).collect()
            } else {
                let ckpt = checkpoint.ok_or_else(|| {
                    Error::Config("retrieve needs --checkpoint or --bm25".into())
                })?;
                let model = load_checkpoint(&ckpt)?;
                let store = load_items(&items, &model.vocab, model.config.segment_len)?;
                let qs = load_queries(&queries, &model.vocab)?;
                let corpus = EncodedCorpus::build(&model, &store);
                match checkpoint2 {
                    Some(ckpt2) => {
                        let second = load_checkpoint(&ckpt2)?;
                        let corpus2 = EncodedCorpus::build(&second, &store);
                        qs.iter()
                            .map(|q| {
                                ensemble_retrieve(
                                    &model,
                                    &second,
                                    q,
                                    &store,
                                    &corpus,
                                    &corpus2,
                                    topn,
                                    crate::itemaug::EnsembleRule::SoftmaxSum,
                                )
                            })
                            .collect::<Result<_>>()?
                    }
                    None => qs
                        .iter()
                        .map(|q| retrieve(&model, q, &store, &corpus, topn))
                        .collect::<Result<_>>()?,
                }
            };
            write_run(&rankings, &tag, &out)?;
            println!("wrote {} rankings to {}", rankings.len(), out.display());
        }
        Cmd::Evaluate { run, queries, json } => {
            let gold = read_gold_map(&queries)?;
            let report = evaluate_run_file(&run, &gold)?;
            print!("{}", report.to_text());
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
        }
        Cmd::Pilot {
            config,
            checkpoint,
            bm25,
            out,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let work = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let data = prepare_data(&cfg, &work)?;
            let queries = &data.eval_queries;
            let report = if bm25 {
                let index = bm25_build(&data.items, 1.2, 0.75)?;
                sentence_deletion_study(&Backend::Bm25(&index), queries, &data.items)?
            } else {
                let ckpt = checkpoint
                    .ok_or_else(|| Error::Config("pilot needs --checkpoint or --bm25".into()))?;
                let model = load_checkpoint(&ckpt)?;
                let corpus = EncodedCorpus::build(&model, &data.items);
                sentence_deletion_study(
                    &Backend::Dense {
                        model: &model,
                        corpus: &corpus,
                    },
                    queries,
                    &data.items,
                )?
            };
            print!("{}", report.to_text());
            write_json(&out, &report)?;
        }
        Cmd::IntervalAblation {
            config,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let work = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let data = prepare_data(&cfg, &work)?;
            let tset = TrainingSet::from_gold(&data.train_queries, &data.items)?;
            let start = init_params(&cfg.model_config(), &data.vocab)?;
            let results = gradient_interval_ablation(
                &start,
                &tset,
                &data.train_queries,
                &data.items,
                &data.eval_queries,
                5,
            )?;
            for r in &results {
                println!(
                    "interval {}  em_baseline {:.4}  em_variant {:.4}  decrease {:+.4}",
                    r.interval, r.em_baseline, r.em_variant, r.em_decrease
                );
            }
            write_json(&out, &results)?;
        }
        Cmd::AugQuality {
            config,
            checkpoint,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let work = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let data = prepare_data(&cfg, &work)?;
            let model = load_checkpoint(&checkpoint)?;
            let aug = cfg
                .augment_config()
                .ok_or_else(|| Error::Config("augmentation is disabled in this config".into()))?;
            let report = augmentation_quality(
                &model,
                &data.train_queries,
                &data.items,
                &aug,
                cfg.train.seed,
            )?;
            println!(
                "examples {}  error_rate {:.4}  mean_cosine_distance {:.4}",
                report.examples, report.error_rate, report.mean_cosine_distance
            );
            write_json(&out, &report)?;
        }
        Cmd::Pipeline {
            config,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            if cfg.is_grid() {
                let results = run_grid(&cfg, &out)?;
                for (cell, artifacts) in &results {
                    println!(
                        "{}: em {:.4} acc@5 {:.4} mrr {:.4}",
                        cell.label.as_deref().unwrap_or("run"),
                        artifacts.report.mean.em,
                        artifacts.report.mean.acc_at_5,
                        artifacts.report.mean.mrr
                    );
                }
            } else {
                let artifacts = run_pipeline(&cfg, &out)?;
                print!("{}", artifacts.report.to_text());
            }
        }
    }
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error too
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
