//! End-to-end pipeline: data preparation (ingestion or synthetic
//! generation), teacher training with the configured augmenter, rank-gated
//! item augmentation, student training from the initial snapshot,
//! ensemble retrieval on the evaluation split, and metrics.
//!
//! Every stage writes its artifact into the output directory and is
//! skipped on re-run when the artifact already exists, so interrupted runs
//! resume. A fixed config and seed produce byte-identical run files and
//! metrics reports.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{GridCell, PipelineConfig};
use crate::corpus::{
    load_items, load_queries, read_item_texts, read_query_texts, write_run, ItemStore, QuerySet,
    RankedList, TrainingSet, Vocab,
};
use crate::encoder::{
    init_params, load_checkpoint, retrieve, save_checkpoint, train, EncodedCorpus, ModelParams,
};
use crate::error::{Error, Result};
use crate::itemaug::{
    build_augmented_pairs, ensemble_retrieve, extend_training_set, read_pairs_file, train_student,
    write_pairs_file,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::synthbench::{generate, write_files, SynthFiles};

pub struct PreparedData {
    pub vocab: Vocab,
    pub items: ItemStore,
    pub train_queries: QuerySet,
    pub eval_queries: QuerySet,
    pub labels_path: Option<PathBuf>,
    pub eval_labels_path: Option<PathBuf>,
}

pub struct PipelineArtifacts {
    pub out_dir: PathBuf,
    pub teacher_ckpt: PathBuf,
    pub tprime: Option<PathBuf>,
    pub student_ckpt: Option<PathBuf>,
    pub run_file: PathBuf,
    pub metrics_txt: PathBuf,
    pub metrics_json: PathBuf,
    pub report: MetricsReport,
}

struct StageLog {
    path: PathBuf,
    lines: Vec<String>,
}

impl StageLog {
    fn new(path: PathBuf) -> StageLog {
        StageLog {
            path,
            lines: Vec::new(),
        }
    }

    fn record(&mut self, line: String) {
        self.lines.push(line);
    }

    fn flush(&self) -> Result<()> {
        let mut f = fs::File::create(&self.path).map_err(|e| Error::io(&self.path, e))?;
        for line in &self.lines {
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Resolve the data files of a config: generate the synthetic benchmark
/// into `out_dir/data` when a [synth] section is present, otherwise load
/// the referenced files. The vocabulary is always built from the item
/// texts plus the training query texts.
pub fn prepare_data(cfg: &PipelineConfig, out_dir: &Path) -> Result<PreparedData> {
    let (items_path, queries_path, eval_path, labels, eval_labels) = match &cfg.synth {
        Some(synth_cfg) => {
            let data_dir = out_dir.join("data");
            let files = SynthFiles::in_dir(&data_dir);
            let exists = files.items.exists()
                && files.queries.exists()
                && files.eval_queries.exists()
                && files.labels.exists();
            if !exists {
                let data = generate(synth_cfg)?;
                write_files(&data, &data_dir)?;
            }
            (
                files.items.clone(),
                files.queries.clone(),
                Some(files.eval_queries.clone()),
                Some(files.labels.clone()),
                Some(files.eval_labels.clone()),
            )
        }
        None => {
            let items = cfg.data.items.clone().ok_or_else(|| {
                Error::Config("no [synth] section and no data.items path".into())
            })?;
            let queries = cfg.data.queries.clone().ok_or_else(|| {
                Error::Config("no [synth] section and no data.queries path".into())
            })?;
            (
                items,
                queries,
                cfg.data.eval_queries.clone(),
                cfg.data.labels.clone(),
                None,
            )
        }
    };

    let mut texts = read_item_texts(&items_path)?;
    texts.extend(read_query_texts(&queries_path)?);
    let vocab = Vocab::build(texts.iter().map(String::as_str), cfg.data.min_count)?;
    let items = load_items(&items_path, &vocab, cfg.model.segment_len)?;
    let train_queries = load_queries(&queries_path, &vocab)?;
    let eval_queries = match &eval_path {
        Some(p) => load_queries(p, &vocab)?,
        // without a held-out split, evaluation falls back to the training
        // queries (self-retrieval)
        None => train_queries.clone(),
    };
    Ok(PreparedData {
        vocab,
        items,
        train_queries,
        eval_queries,
        labels_path: labels,
        eval_labels_path: eval_labels,
    })
}

fn config_fingerprint(model: &ModelParams) -> String {
    serde_json::to_string(&model.config).expect("config serializes")
}

fn load_or_train_teacher(
    cfg: &PipelineConfig,
    data: &PreparedData,
    tset: &TrainingSet,
    path: &Path,
    log: &mut StageLog,
) -> Result<ModelParams> {
    if path.exists() {
        let teacher = load_checkpoint(path)?;
        if config_fingerprint(&teacher)
            != serde_json::to_string(&cfg.model_config()).expect("config serializes")
        {
            return Err(Error::Invalid(format!(
                "checkpoint {} was trained under a different config; remove it or change the output directory",
                path.display()
            )));
        }
        log.record(format!("stage=teacher status=resumed path={}", path.display()));
        return Ok(teacher);
    }
    let start = init_params(&cfg.model_config(), &data.vocab)?;
    let augment = cfg.augment_config();
    let teacher = train(&start, tset, &data.train_queries, &data.items, augment.as_ref())?;
    save_checkpoint(&teacher, path)?;
    log.record(format!(
        "stage=teacher status=trained seed={} epochs={} augment={}",
        cfg.train.seed,
        cfg.train.epochs,
        augment.is_some()
    ));
    Ok(teacher)
}

/// Execute the full pipeline into `out_dir`. Stage artifacts: resolved
/// config, generated data (for synthetic runs), teacher checkpoint, the
/// pseudo-positive pairs file, student checkpoint, run file(s), and the
/// metrics report in text and JSON forms.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineArtifacts> {
    if cfg.is_grid() {
        return Err(Error::Config(
            "config contains hyperparameter lists; use run_grid".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save(&out_dir.join("config.toml"))?;
    let mut log = StageLog::new(out_dir.join("pipeline.log"));

    let data = prepare_data(cfg, out_dir)?;
    log.record(format!(
        "stage=data items={} train_queries={} eval_queries={} vocab={}",
        data.items.len(),
        data.train_queries.len(),
        data.eval_queries.len(),
        data.vocab.len()
    ));
    let tset = TrainingSet::from_gold(&data.train_queries, &data.items)?;

    let teacher_path = out_dir.join("teacher.json");
    let teacher = load_or_train_teacher(cfg, &data, &tset, &teacher_path, &mut log)?;

    let mut tprime_path = None;
    let mut student_path = None;
    let mut student = None;
    if let Some(itemaug_cfg) = cfg.itemaug_config() {
        let tp_path = out_dir.join("tprime.jsonl");
        let pairs = if tp_path.exists() {
            let pairs = read_pairs_file(&tp_path)?;
            log.record(format!("stage=itemaug status=resumed pairs={}", pairs.len()));
            pairs
        } else {
            let pairs =
                build_augmented_pairs(&teacher, &tset, &data.train_queries, &data.items, &itemaug_cfg)?;
            write_pairs_file(&tp_path, &pairs)?;
            log.record(format!(
                "stage=itemaug status=built pairs={} k={}",
                pairs.len(),
                itemaug_cfg.k
            ));
            pairs
        };
        tprime_path = Some(tp_path);

        let st_path = out_dir.join("student.json");
        let st = if st_path.exists() {
            log.record(format!("stage=student status=resumed path={}", st_path.display()));
            load_checkpoint(&st_path)?
        } else {
            let combined = extend_training_set(&tset, &pairs, &data.train_queries, &data.items)?;
            let augment = cfg.augment_config();
            let st = train_student(
                &teacher,
                &combined,
                &data.train_queries,
                &data.items,
                augment.as_ref(),
            )?;
            save_checkpoint(&st, &st_path)?;
            log.record(format!(
                "stage=student status=trained pairs={} seed={}",
                combined.len(),
                cfg.train.seed
            ));
            st
        };
        student_path = Some(st_path);
        student = Some(st);
    } else {
        log.record("stage=itemaug status=disabled".to_string());
    }

    // retrieval on the evaluation split
    let topn = cfg.data.topn;
    let teacher_corpus = EncodedCorpus::build(&teacher, &data.items);
    let rankings: Vec<RankedList> = match &student {
        Some(st) => {
            let student_corpus = EncodedCorpus::build(st, &data.items);
            let rule = cfg.itemaug_config().expect("student implies itemaug").ensemble;
            let teacher_runs: Vec<RankedList> = data
                .eval_queries
                .iter()
                .map(|q| retrieve(&teacher, q, &data.items, &teacher_corpus, topn))
                .collect::<Result<_>>()?;
            write_run(&teacher_runs, "teacher", &out_dir.join("teacher_eval.run"))?;
            data.eval_queries
                .iter()
                .map(|q| {
                    ensemble_retrieve(
                        &teacher,
                        st,
                        q,
                        &data.items,
                        &teacher_corpus,
                        &student_corpus,
                        topn,
                        rule,
                    )
                })
                .collect::<Result<_>>()?
        }
        None => data
            .eval_queries
            .iter()
            .map(|q| retrieve(&teacher, q, &data.items, &teacher_corpus, topn))
            .collect::<Result<_>>()?,
    };
    let run_file = out_dir.join("eval.run");
    write_run(&rankings, "gradselect", &run_file)?;
    log.record(format!("stage=retrieve queries={} topn={topn}", rankings.len()));

    let gold = data.eval_queries.gold_map();
    let report = evaluate(&rankings, &gold)?;
    let metrics_txt = out_dir.join("metrics.txt");
    let metrics_json = out_dir.join("metrics.json");
    fs::write(&metrics_txt, report.to_text()).map_err(|e| Error::io(&metrics_txt, e))?;
    fs::write(&metrics_json, report.to_json()).map_err(|e| Error::io(&metrics_json, e))?;
    log.record(format!(
        "stage=evaluate em={:.6} acc5={:.6} mrr={:.6}",
        report.mean.em, report.mean.acc_at_5, report.mean.mrr
    ));
    log.flush()?;

    Ok(PipelineArtifacts {
        out_dir: out_dir.to_path_buf(),
        teacher_ckpt: teacher_path,
        tprime: tprime_path,
        student_ckpt: student_path,
        run_file,
        metrics_txt,
        metrics_json,
        report,
    })
}

/// Expand a grid config and run each cell into its own subdirectory.
pub fn run_grid(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<(GridCell, PipelineArtifacts)>> {
    let mut results = Vec::new();
    for cell in cfg.grid() {
        let dir = match &cell.label {
            Some(label) => out_dir.join(label),
            None => out_dir.to_path_buf(),
        };
        let artifacts = run_pipeline(&cell.config, &dir)?;
        results.push((cell, artifacts));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::SynthConfig;

    fn small_config(seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.model.embed_dim = 16;
        cfg.model.hidden_dim = 12;
        cfg.train.seed = seed;
        cfg.train.epochs = 6;
        cfg.train.batch_size = 4;
        cfg.synth = Some(SynthConfig {
            n_items: 24,
            terms_per_item: 8,
            vocab_size: 150,
            query_terms: 6,
            unseen_rate: 0.3,
            spe_rate: 0.3,
            distractor_sentences: 1,
            seed: 3,
        });
        cfg
    }

    #[test]
    fn pipeline_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(1);
        let artifacts = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(artifacts.teacher_ckpt.exists());
        assert!(artifacts.tprime.as_ref().unwrap().exists());
        assert!(artifacts.student_ckpt.as_ref().unwrap().exists());
        assert!(artifacts.run_file.exists());
        assert!(artifacts.metrics_txt.exists());
        assert!(artifacts.metrics_json.exists());
        assert!(dir.path().join("config.toml").exists());
        assert!(dir.path().join("pipeline.log").exists());
        assert_eq!(artifacts.report.query_count, 24);
    }

    #[test]
    fn itemaug_disabled_skips_student() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(1);
        cfg.itemaug.enabled = false;
        let artifacts = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(artifacts.tprime.is_none());
        assert!(artifacts.student_ckpt.is_none());
        assert!(artifacts.run_file.exists());
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = small_config(7);
        run_pipeline(&cfg, dir_a.path()).unwrap();
        run_pipeline(&cfg, dir_b.path()).unwrap();
        for name in ["eval.run", "metrics.txt", "metrics.json", "teacher_eval.run"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across reruns");
        }
    }

    #[test]
    fn resume_reuses_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(2);
        let first = run_pipeline(&cfg, dir.path()).unwrap();
        let run_before = fs::read(&first.run_file).unwrap();
        // second invocation resumes from artifacts and reproduces outputs
        let second = run_pipeline(&cfg, dir.path()).unwrap();
        let run_after = fs::read(&second.run_file).unwrap();
        assert_eq!(run_before, run_after);
        let log = fs::read_to_string(dir.path().join("pipeline.log")).unwrap();
        assert!(log.contains("status=resumed"), "{log}");
    }

    #[test]
    fn stale_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(3);
        run_pipeline(&cfg, dir.path()).unwrap();
        let mut changed = cfg.clone();
        changed.model.embed_dim = 20;
        let err = run_pipeline(&changed, dir.path()).unwrap_err();
        assert!(err.to_string().contains("different config"), "{err}");
    }
}
