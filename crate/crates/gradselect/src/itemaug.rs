//! Target-item augmentation: pseudo-relevance positives gated by the gold
//! rank, student re-training from the frozen initial parameters, and
//! teacher/student ensembling.
//!
//! For each training circumlocution the teacher retrieves the corpus; when
//! the gold lands outside the top `k`, the top-`k` items become additional
//! positives (`T'`). The student trains on `T ∪ T'` starting from the same
//! initial parameters the teacher started from, and predictions ensemble
//! the two models.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    Circumlocution, ItemStore, Provenance, QuerySet, RankedList, TrainPair, TrainingSet,
};
use crate::encoder::{retrieve, train, EncodedCorpus, ModelParams};
use crate::error::{Error, Result};
use crate::gradaug::AugmentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    /// Sum the per-model softmax distributions over the corpus scores.
    SoftmaxSum,
    /// Reciprocal-rank fusion: sum of `1 / (60 + rank)` per model.
    RecipRankSum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemAugConfig {
    pub k: usize,
    pub ensemble: EnsembleRule,
}

impl Default for ItemAugConfig {
    fn default() -> Self {
        ItemAugConfig {
            k: 2,
            ensemble: EnsembleRule::SoftmaxSum,
        }
    }
}

impl ItemAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("itemaug k must be >= 1".into()));
        }
        Ok(())
    }
}

/// One pseudo-relevance positive: the source query, the teacher-retrieved
/// item and its teacher rank (1..=k).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub query_id: String,
    pub item_id: String,
    pub source_rank: usize,
}

/// Gate and collect pseudo-positives: for every training circumlocution,
/// retrieve with the teacher; queries whose gold rank exceeds `k` emit
/// their top-`k` items, all others emit nothing.
pub fn build_augmented_pairs(
    teacher: &ModelParams,
    tset: &TrainingSet,
    queries: &QuerySet,
    items: &ItemStore,
    cfg: &ItemAugConfig,
) -> Result<Vec<AugmentedPair>> {
    cfg.validate()?;
    let corpus = EncodedCorpus::build(teacher, items);
    let mut pairs = Vec::new();
    for qid in tset.query_ids() {
        let query = queries.by_id(qid).ok_or_else(|| Error::UnknownId {
            id: qid.to_string(),
            context: "training query".into(),
        })?;
        if query.gold_item_id.is_none() {
            return Err(Error::Invalid(format!("query `{qid}` has no gold item")));
        }
        let ranked = retrieve(teacher, query, items, &corpus, items.len())?;
        let gold_rank = ranked
            .gold_rank
            .expect("full-corpus retrieval always ranks the gold");
        if gold_rank > cfg.k {
            for (rank0, (item_id, _)) in ranked.entries.iter().take(cfg.k).enumerate() {
                pairs.push(AugmentedPair {
                    query_id: qid.to_string(),
                    item_id: item_id.clone(),
                    source_rank: rank0 + 1,
                });
            }
        }
    }
    Ok(pairs)
}

/// `T ∪ T'`: the original pairs plus the pseudo-positives tagged as
/// augmented.
pub fn extend_training_set(
    tset: &TrainingSet,
    pairs: &[AugmentedPair],
    queries: &QuerySet,
    items: &ItemStore,
) -> Result<TrainingSet> {
    let mut combined = tset.clone();
    for p in pairs {
        combined.push(
            TrainPair {
                query_id: p.query_id.clone(),
                item_id: p.item_id.clone(),
                provenance: Provenance::Augmented,
            },
            queries,
            items,
        )?;
    }
    Ok(combined)
}

/// Train the student: identical initial parameters (the teacher's frozen
/// snapshot), identical optimizer settings, on the combined pair set.
/// Original and augmented pairs weigh identically.
pub fn train_student(
    teacher: &ModelParams,
    combined: &TrainingSet,
    queries: &QuerySet,
    items: &ItemStore,
    augment: Option<&AugmentConfig>,
) -> Result<ModelParams> {
    let start = teacher.reinitialized();
    train(&start, combined, queries, items, augment)
}

fn full_scores(
    model: &ModelParams,
    query: &Circumlocution,
    corpus: &EncodedCorpus,
) -> Result<Vec<f64>> {
    let q = crate::encoder::query_vector(model, &query.tokens)?;
    Ok(corpus
        .vecs
        .iter()
        .map(|vecs| crate::encoder::score(&q, vecs).0)
        .collect())
}

fn softmax_vec(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Ensemble two models on one query. `SoftmaxSum` sums the per-model
/// softmax-normalized corpus scores; `RecipRankSum` sums reciprocal ranks
/// with the usual 60 offset. Ties break by ascending item id.
pub fn ensemble_retrieve(
    teacher: &ModelParams,
    student: &ModelParams,
    query: &Circumlocution,
    items: &ItemStore,
    teacher_corpus: &EncodedCorpus,
    student_corpus: &EncodedCorpus,
    topn: usize,
    rule: EnsembleRule,
) -> Result<RankedList> {
    let fused: Vec<(String, f64)> = match rule {
        EnsembleRule::SoftmaxSum => {
            let pt = softmax_vec(&full_scores(teacher, query, teacher_corpus)?);
            let ps = softmax_vec(&full_scores(student, query, student_corpus)?);
            (0..items.len())
                .map(|i| (items.get(i).id.clone(), pt[i] + ps[i]))
                .collect()
        }
        EnsembleRule::RecipRankSum => {
            let rank_map = |model: &ModelParams, corpus: &EncodedCorpus| -> Result<Vec<usize>> {
                let ranked = retrieve(model, query, items, corpus, items.len())?;
                let mut ranks = vec![0usize; items.len()];
                for (rank0, (id, _)) in ranked.entries.iter().enumerate() {
                    ranks[items.index_of(id).expect("retrieved id exists")] = rank0 + 1;
                }
                Ok(ranks)
            };
            let rt = rank_map(teacher, teacher_corpus)?;
            let rs = rank_map(student, student_corpus)?;
            (0..items.len())
                .map(|i| {
                    let s = 1.0 / (60.0 + rt[i] as f64) + 1.0 / (60.0 + rs[i] as f64);
                    (items.get(i).id.clone(), s)
                })
                .collect()
        }
    };
    Ok(RankedList::from_scores(
        query.id.clone(),
        fused,
        topn,
        query.gold_item_id.as_deref(),
    ))
}

/// Write `T'` as one JSON object per line.
pub fn write_pairs_file(path: &Path, pairs: &[AugmentedPair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).expect("pair serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pairs_file(path: &Path) -> Result<Vec<AugmentedPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: AugmentedPair = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}
