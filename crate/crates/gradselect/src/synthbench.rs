//! Synthetic anomia-style benchmark: items are bags of terms drawn from a
//! Zipf-weighted vocabulary with an item-specific bias (so items are
//! separable but share terms), and queries describe their gold item with a
//! controllable fraction of withheld terms (unseen), terms borrowed from
//! other items (SPE), and filler sentences of corpus-common terms.
//!
//! Every query token carries a ground-truth label (TRUE_TERM / SPE_TERM /
//! FILLER) written to a sidecar labels file that only grading code reads.
//! Two query realizations are generated per item — a training one and an
//! evaluation one — so retrieval quality is measured on fresh draws over
//! the same corpus.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_items_file, write_queries_file, ItemStore, QueryFileRecord, QuerySet};
use crate::encoder::{embed_query, EncodedCorpus, ModelParams};
use crate::error::{Error, Result};
use crate::gradaug::{importance_scores_corpus, ImportanceSignal};
use crate::util::derive_rng;

const ZIPF_EXPONENT: f64 = 1.0;
/// Bias-set size, as a multiple of terms_per_item.
const BIAS_POOL_FACTOR: usize = 3;
/// Sampling boost for a term inside the item's bias set.
const BIAS_BOOST: f64 = 50.0;
const TRUE_SENTENCE_LEN: usize = 5;
const FILLER_SENTENCE_LEN: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub terms_per_item: usize,
    pub vocab_size: usize,
    /// Content tokens per query (before filler sentences).
    pub query_terms: usize,
    /// Fraction of an item's descriptive terms withheld from its query.
    pub unseen_rate: f64,
    /// Fraction of query terms replaced by terms from other items.
    pub spe_rate: f64,
    pub distractor_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 200,
            terms_per_item: 12,
            vocab_size: 1500,
            query_terms: 10,
            unseen_rate: 0.4,
            spe_rate: 0.3,
            distractor_sentences: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 2 {
            return Err(Error::Config("n_items must be >= 2".into()));
        }
        if self.terms_per_item == 0 || self.query_terms == 0 {
            return Err(Error::Config("terms_per_item and query_terms must be >= 1".into()));
        }
        if self.vocab_size < self.terms_per_item * 2 {
            return Err(Error::Config("vocab_size too small for terms_per_item".into()));
        }
        for (name, v) in [("unseen_rate", self.unseen_rate), ("spe_rate", self.spe_rate)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        let spe = (self.spe_rate * self.query_terms as f64).round() as usize;
        if spe >= self.query_terms {
            return Err(Error::Config(
                "spe_rate leaves no true terms in the query".into(),
            ));
        }
        let visible = self.terms_per_item
            - (self.unseen_rate * self.terms_per_item as f64).round() as usize;
        if visible == 0 {
            return Err(Error::Config("unseen_rate withholds every item term".into()));
        }
        Ok(())
    }
}

/// Ground-truth role of one query token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenLabel {
    TrueTerm,
    SpeTerm,
    Filler,
}

#[derive(Debug, Clone)]
pub struct SynthQuery {
    pub id: String,
    pub gold_id: String,
    /// Tokens grouped into sentences.
    pub sentences: Vec<Vec<String>>,
    /// Labels aligned with the flattened token sequence.
    pub labels: Vec<TokenLabel>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// (item id, distinct terms in emission order)
    pub items: Vec<(String, Vec<String>)>,
    pub train_queries: Vec<SynthQuery>,
    pub eval_queries: Vec<SynthQuery>,
}

fn term_name(idx: usize) -> String {
    format!("t{idx:04}")
}

/// Weighted sample of one index from cumulative weights.
fn sample_cumulative(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total = *cum.last().expect("non-empty weights");
    let u = rng.random::<f64>() * total;
    match cum.binary_search_by(|c| c.partial_cmp(&u).expect("finite weights")) {
        Ok(i) => i + 1,
        Err(i) => i,
    }
    .min(cum.len() - 1)
}

fn weighted_distinct(weights: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cum.push(acc);
    }
    let mut taken = Vec::with_capacity(count);
    while taken.len() < count {
        let idx = sample_cumulative(&cum, rng);
        if !taken.contains(&idx) {
            taken.push(idx);
        }
    }
    taken
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 / ((i + 1) as f64).powf(ZIPF_EXPONENT)).collect()
}

fn make_query(
    cfg: &SynthConfig,
    items: &[(String, Vec<String>)],
    item_idx: usize,
    query_id: String,
    zipf_cum: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SynthQuery> {
    let (gold_id, gold_terms) = &items[item_idx];
    let withheld = (cfg.unseen_rate * cfg.terms_per_item as f64).round() as usize;
    let visible_count = cfg.terms_per_item - withheld;
    let mut visible: Vec<&String> = gold_terms.iter().collect();
    visible.shuffle(rng);
    visible.truncate(visible_count);

    let spe_count = (cfg.spe_rate * cfg.query_terms as f64).round() as usize;
    let true_count = cfg.query_terms - spe_count;
    // cycle the visible terms when the query asks for more true tokens
    // than the speaker has available (repetition, as in anomic speech)
    let true_tokens: Vec<String> = (0..true_count)
        .map(|i| visible[i % visible.len()].clone())
        .collect();

    let mut spe_tokens = Vec::with_capacity(spe_count);
    for _ in 0..spe_count {
        let mut found = None;
        for _ in 0..200 {
            let donor = rng.random_range(0..items.len());
            if donor == item_idx {
                continue;
            }
            let term = &items[donor].1[rng.random_range(0..items[donor].1.len())];
            if !gold_terms.contains(term) {
                found = Some(term.clone());
                break;
            }
        }
        spe_tokens.push(found.ok_or_else(|| {
            Error::Config("cannot sample SPE terms: items overlap the gold almost entirely".into())
        })?);
    }

    // sentences: true terms chunked, SPE terms planted as one sentence,
    // filler sentences of corpus-common terms; sentence order shuffled
    let mut sentences: Vec<(Vec<String>, TokenLabel)> = Vec::new();
    for chunk in true_tokens.chunks(TRUE_SENTENCE_LEN) {
        sentences.push((chunk.to_vec(), TokenLabel::TrueTerm));
    }
    if !spe_tokens.is_empty() {
        sentences.push((spe_tokens, TokenLabel::SpeTerm));
    }
    for _ in 0..cfg.distractor_sentences {
        let filler: Vec<String> = (0..FILLER_SENTENCE_LEN)
            .map(|_| term_name(sample_cumulative(zipf_cum, rng)))
            .collect();
        sentences.push((filler, TokenLabel::Filler));
    }
    sentences.shuffle(rng);

    let mut labels = Vec::new();
    let mut sentence_tokens = Vec::with_capacity(sentences.len());
    for (tokens, label) in sentences {
        labels.extend(std::iter::repeat_n(label, tokens.len()));
        sentence_tokens.push(tokens);
    }
    Ok(SynthQuery {
        id: query_id,
        gold_id: gold_id.clone(),
        sentences: sentence_tokens,
        labels,
    })
}

/// Generate a full benchmark: items, one training query and one evaluation
/// query per item, with ground-truth labels. Pure function of the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let zipf = zipf_weights(cfg.vocab_size);
    let mut zipf_cum = Vec::with_capacity(zipf.len());
    let mut acc = 0.0;
    for &w in &zipf {
        acc += w;
        zipf_cum.push(acc);
    }

    let mut rng_items = derive_rng(cfg.seed, "synth-items", 0);
    let bias_size = (BIAS_POOL_FACTOR * cfg.terms_per_item).min(cfg.vocab_size);
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let mut bias = vec![false; cfg.vocab_size];
        let mut chosen = 0;
        while chosen < bias_size {
            let idx = rng_items.random_range(0..cfg.vocab_size);
            if !bias[idx] {
                bias[idx] = true;
                chosen += 1;
            }
        }
        let weights: Vec<f64> = zipf
            .iter()
            .enumerate()
            .map(|(v, &w)| if bias[v] { w * BIAS_BOOST } else { w })
            .collect();
        let term_ids = weighted_distinct(&weights, cfg.terms_per_item, &mut rng_items);
        let terms: Vec<String> = term_ids.into_iter().map(term_name).collect();
        items.push((format!("i{i:04}"), terms));
    }

    let mut train_queries = Vec::with_capacity(cfg.n_items);
    let mut eval_queries = Vec::with_capacity(cfg.n_items);
    for i in 0..items.len() {
        let mut rng_q = derive_rng(cfg.seed, &format!("synth-query-train:{i}"), 0);
        train_queries.push(make_query(
            cfg,
            &items,
            i,
            format!("q{i:04}"),
            &zipf_cum,
            &mut rng_q,
        )?);
        let mut rng_e = derive_rng(cfg.seed, &format!("synth-query-eval:{i}"), 0);
        eval_queries.push(make_query(
            cfg,
            &items,
            i,
            format!("e{i:04}"),
            &zipf_cum,
            &mut rng_e,
        )?);
    }
    Ok(SynthData {
        items,
        train_queries,
        eval_queries,
    })
}

/// Paths of the files a generated benchmark is written to.
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub items: PathBuf,
    pub queries: PathBuf,
    pub labels: PathBuf,
    pub eval_queries: PathBuf,
    pub eval_labels: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> SynthFiles {
        SynthFiles {
            items: dir.join("items.jsonl"),
            queries: dir.join("queries.jsonl"),
            labels: dir.join("labels.jsonl"),
            eval_queries: dir.join("eval_queries.jsonl"),
            eval_labels: dir.join("eval_labels.jsonl"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    query_id: String,
    labels: Vec<TokenLabel>,
}

fn write_labels_file(path: &Path, queries: &[SynthQuery]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in queries {
        let rec = LabelRecord {
            query_id: q.id.clone(),
            labels: q.labels.clone(),
        };
        let line = serde_json::to_string(&rec).expect("labels serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a sidecar labels file.
pub fn read_labels_file(path: &Path) -> Result<BTreeMap<String, Vec<TokenLabel>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.query_id, rec.labels);
    }
    Ok(out)
}

/// Write the benchmark in the standard corpus formats.
pub fn write_files(data: &SynthData, dir: &Path) -> Result<SynthFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles::in_dir(dir);
    let item_records: Vec<(String, String)> = data
        .items
        .iter()
        .map(|(id, terms)| (id.clone(), terms.join(" ")))
        .collect();
    write_items_file(&files.items, &item_records)?;
    let to_records = |queries: &[SynthQuery]| -> Vec<QueryFileRecord> {
        queries
            .iter()
            .map(|q| QueryFileRecord {
                id: q.id.clone(),
                sentences: q.sentences.iter().map(|s| s.join(" ")).collect(),
                gold_id: q.gold_id.clone(),
            })
            .collect()
    };
    write_queries_file(&files.queries, &to_records(&data.train_queries))?;
    write_queries_file(&files.eval_queries, &to_records(&data.eval_queries))?;
    write_labels_file(&files.labels, &data.train_queries)?;
    write_labels_file(&files.eval_labels, &data.eval_queries)?;
    Ok(files)
}

/// How well importance scores separate true terms from SPE terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientProxyReport {
    /// Mean importance rank (1 = most important) of TRUE_TERM tokens.
    pub mean_rank_true: f64,
    /// Mean importance rank of SPE_TERM tokens.
    pub mean_rank_spe: f64,
    /// Mean per-query AUROC of importance as a TRUE_TERM-vs-SPE_TERM
    /// detector; 0.5 is chance.
    pub auroc: f64,
    pub evaluated: usize,
    /// Queries lacking either label class (e.g. all-SPE degenerates).
    pub skipped: usize,
}

fn auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut u = 0.0;
    for p in pos {
        for n in neg {
            u += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    u / (pos.len() * neg.len()) as f64
}

/// Score the gradient-as-proxy hypothesis: compute per-token importance
/// for every labeled query (candidates = whole corpus) and aggregate rank
/// statistics by ground-truth label.
pub fn grade_gradient_proxy(
    model: &ModelParams,
    queries: &QuerySet,
    labels: &BTreeMap<String, Vec<TokenLabel>>,
    items: &ItemStore,
    signal: ImportanceSignal,
) -> Result<GradientProxyReport> {
    let corpus = EncodedCorpus::build(model, items);
    let mut rank_true = Vec::new();
    let mut rank_spe = Vec::new();
    let mut aurocs = Vec::new();
    let mut skipped = 0;
    for q in queries.iter() {
        let Some(q_labels) = labels.get(&q.id) else {
            return Err(Error::UnknownId {
                id: q.id.clone(),
                context: "query without labels".into(),
            });
        };
        if q_labels.len() != q.tokens.len() {
            return Err(Error::Invalid(format!(
                "labels for `{}` cover {} tokens but the query has {}",
                q.id,
                q_labels.len(),
                q.tokens.len()
            )));
        }
        let gold = q
            .gold_item_id
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("query `{}` has no gold item", q.id)))?;
        let gold_idx = items.index_of(gold).ok_or_else(|| Error::UnknownId {
            id: gold.clone(),
            context: "gold item".into(),
        })?;
        let seq = embed_query(model, &q.tokens);
        let imp = importance_scores_corpus(model, &seq, &corpus, gold_idx, signal)?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, label) in q_labels.iter().enumerate() {
            match label {
                TokenLabel::TrueTerm => {
                    pos.push(imp.scores[i]);
                    rank_true.push(imp.rank_of(i) as f64);
                }
                TokenLabel::SpeTerm => {
                    neg.push(imp.scores[i]);
                    rank_spe.push(imp.rank_of(i) as f64);
                }
                TokenLabel::Filler => {}
            }
        }
        if pos.is_empty() || neg.is_empty() {
            skipped += 1;
            continue;
        }
        aurocs.push(auroc(&pos, &neg));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(GradientProxyReport {
        mean_rank_true: mean(&rank_true),
        mean_rank_spe: mean(&rank_spe),
        auroc: mean(&aurocs),
        evaluated: aurocs.len(),
        skipped,
    })
}

/// Load a generated benchmark back through the standard ingestion path.
/// The vocabulary is built from the item texts plus the training queries
/// (evaluation queries may contain unseen tokens, which map to UNK).
pub fn load_generated(
    files: &SynthFiles,
    min_count: usize,
    segment_len: usize,
) -> Result<(crate::corpus::Vocab, ItemStore, QuerySet, QuerySet)> {
    let mut texts = crate::corpus::read_item_texts(&files.items)?;
    texts.extend(crate::corpus::read_query_texts(&files.queries)?);
    let vocab = crate::corpus::Vocab::build(texts.iter().map(String::as_str), min_count)?;
    let items = crate::corpus::load_items(&files.items, &vocab, segment_len)?;
    let train = crate::corpus::load_queries(&files.queries, &vocab)?;
    let eval = crate::corpus::load_queries(&files.eval_queries, &vocab)?;
    Ok((vocab, items, train, eval))
}
