//! Diagnostic studies: the sentence-deletion pilot, the gradient-interval
//! ablation, and augmentation relevance/diversity measures.

use serde::{Deserialize, Serialize};

use crate::corpus::{Circumlocution, ItemStore, QuerySet, RankedList, TokenId};
use crate::encoder::{
    cosine, embed_query, encode_query, retrieve_seq, retrieve_tokens, train, EncodedCorpus,
    ModelParams,
};
use crate::error::{Error, Result};
use crate::gradaug::{
    apply_realization, importance_scores_corpus, sample_realization, select_band,
    selector_eligible, AugmentConfig, Selector,
};
use crate::lexical::BM25Index;
use crate::metrics::{ndcg, recall_at};
use crate::util::derive_rng;

/// A scoring backend for the deletion pilot: the trained dense model or
/// the BM25 baseline.
pub enum Backend<'a> {
    Dense {
        model: &'a ModelParams,
        corpus: &'a EncodedCorpus,
    },
    Bm25(&'a BM25Index),
}

impl Backend<'_> {
    fn rank(
        &self,
        query_id: &str,
        tokens: &[TokenId],
        gold: Option<&str>,
        items: &ItemStore,
    ) -> Result<RankedList> {
        match self {
            Backend::Dense { model, corpus } => {
                retrieve_tokens(model, query_id, tokens, gold, items, corpus, items.len())
            }
            Backend::Bm25(index) => {
                let scores = index.score_tokens(tokens);
                let scored: Vec<(String, f64)> = scores
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s > 0.0)
                    .map(|(doc, &s)| (items.get(doc).id.clone(), s))
                    .collect();
                Ok(RankedList::from_scores(
                    query_id.to_string(),
                    scored,
                    items.len(),
                    gold,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeletionDelta {
    pub query_id: String,
    pub sentence: usize,
    pub delta: f64,
}

/// Outcome of deleting each sentence of each query and re-scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceDeletionReport {
    pub improved: usize,
    pub decreased: usize,
    pub unchanged: usize,
    /// Pairs skipped because deleting the sentence would empty the query.
    pub skipped_pairs: usize,
    pub queries_evaluated: usize,
    pub queries_without_sentences: usize,
    /// Two-bucket ratios over changed pairs only (improved + decreased).
    pub improved_ratio_changed: f64,
    pub decreased_ratio_changed: f64,
    /// Three-bucket ratios over all classified pairs.
    pub improved_ratio_all: f64,
    pub decreased_ratio_all: f64,
    pub unchanged_ratio_all: f64,
    pub deltas: Vec<DeletionDelta>,
}

impl SentenceDeletionReport {
    pub fn to_text(&self) -> String {
        format!(
            "pairs            {}\nimproved         {}\ndecreased        {}\nunchanged        {}\nskipped          {}\nimproved (chg)   {:.4}\ndecreased (chg)  {:.4}\nimproved (all)   {:.4}\ndecreased (all)  {:.4}\nunchanged (all)  {:.4}\n",
            self.improved + self.decreased + self.unchanged,
            self.improved,
            self.decreased,
            self.unchanged,
            self.skipped_pairs,
            self.improved_ratio_changed,
            self.decreased_ratio_changed,
            self.improved_ratio_all,
            self.decreased_ratio_all,
            self.unchanged_ratio_all,
        )
    }
}

fn tokens_without_spans(
    query: &Circumlocution,
    drop: impl Fn(usize) -> bool,
) -> Vec<TokenId> {
    let spans = query.sentences.as_ref().expect("caller checked spans");
    let mut dropped = vec![false; query.tokens.len()];
    for (si, &(a, b)) in spans.iter().enumerate() {
        if drop(si) {
            for flag in dropped.iter_mut().take(b).skip(a) {
                *flag = true;
            }
        }
    }
    query
        .tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped[*i])
        .map(|(_, &t)| t)
        .collect()
}

/// Delete each sentence of each query in turn and measure the change in
/// full-depth nDCG. Sentences flagged in `excluded_sentences` are removed
/// from the query up front (annotation-based pre-filtering) and are not
/// deletion candidates. Deltas classify as improved (> 0), decreased
/// (< 0) or unchanged; ratios are reported both over changed pairs and
/// over all pairs.
pub fn sentence_deletion_study(
    backend: &Backend,
    queries: &QuerySet,
    items: &ItemStore,
) -> Result<SentenceDeletionReport> {
    let mut improved = 0;
    let mut decreased = 0;
    let mut unchanged = 0;
    let mut skipped = 0;
    let mut no_sentences = 0;
    let mut evaluated = 0;
    let mut deltas = Vec::new();

    for query in queries.iter() {
        let Some(spans) = &query.sentences else {
            no_sentences += 1;
            continue;
        };
        let gold = query.gold_item_id.as_deref().ok_or_else(|| {
            Error::Invalid(format!("query `{}` has no gold item", query.id))
        })?;
        let excluded = |si: usize| query.excluded_sentences.contains(&si);
        let base_tokens = tokens_without_spans(query, &excluded);
        if base_tokens.is_empty() {
            no_sentences += 1;
            continue;
        }
        evaluated += 1;
        let base_rank = backend.rank(&query.id, &base_tokens, Some(gold), items)?;
        let base_ndcg = ndcg(&base_rank, gold, None);

        for (si, &(a, b)) in spans.iter().enumerate() {
            if excluded(si) || a == b {
                continue;
            }
            let variant = tokens_without_spans(query, |s| excluded(s) || s == si);
            if variant.is_empty() {
                skipped += 1;
                continue;
            }
            let rank = backend.rank(&query.id, &variant, Some(gold), items)?;
            let delta = ndcg(&rank, gold, None) - base_ndcg;
            if delta > 0.0 {
                improved += 1;
            } else if delta < 0.0 {
                decreased += 1;
            } else {
                unchanged += 1;
            }
            deltas.push(DeletionDelta {
                query_id: query.id.clone(),
                sentence: si,
                delta,
            });
        }
    }

    let changed = improved + decreased;
    let all = changed + unchanged;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(SentenceDeletionReport {
        improved,
        decreased,
        unchanged,
        skipped_pairs: skipped,
        queries_evaluated: evaluated,
        queries_without_sentences: no_sentences,
        improved_ratio_changed: ratio(improved, changed),
        decreased_ratio_changed: ratio(decreased, changed),
        improved_ratio_all: ratio(improved, all),
        decreased_ratio_all: ratio(decreased, all),
        unchanged_ratio_all: ratio(unchanged, all),
        deltas,
    })
}

/// Mean exact match (recall@1) of a model over a query set.
pub fn evaluate_em(
    model: &ModelParams,
    eval_queries: &QuerySet,
    items: &ItemStore,
) -> Result<f64> {
    let corpus = EncodedCorpus::build(model, items);
    let mut sum = 0.0;
    for q in eval_queries.iter() {
        let gold = q.gold_item_id.as_deref().ok_or_else(|| {
            Error::Invalid(format!("query `{}` has no gold item", q.id))
        })?;
        let ranked = crate::encoder::retrieve(model, q, items, &corpus, items.len())?;
        sum += recall_at(&ranked, gold, 1);
    }
    Ok(sum / eval_queries.len().max(1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalAblation {
    /// 1 = highest-importance interval.
    pub interval: usize,
    pub em_baseline: f64,
    pub em_variant: f64,
    pub em_decrease: f64,
}

/// Rank every training query's tokens by importance under a reference
/// model trained from the initial snapshot, partition the ranks into
/// `intervals` equal intervals, and for each interval retrain from the
/// same snapshot with half of that interval's tokens removed (every other
/// token by interval-internal rank). Reports the exact-match drop on the
/// evaluation queries per interval.
pub fn gradient_interval_ablation(
    start: &ModelParams,
    tset: &crate::corpus::TrainingSet,
    queries: &QuerySet,
    items: &ItemStore,
    eval_queries: &QuerySet,
    intervals: usize,
) -> Result<Vec<IntervalAblation>> {
    if intervals == 0 {
        return Err(Error::Config("intervals must be >= 1".into()));
    }
    let reference = train(start, tset, queries, items, None)?;
    let em_baseline = evaluate_em(&reference, eval_queries, items)?;
    let corpus = EncodedCorpus::build(&reference, items);

    // importance order per training query under the reference model
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(queries.len());
    for q in queries.iter() {
        let gold = q.gold_item_id.as_deref().ok_or_else(|| {
            Error::Invalid(format!("query `{}` has no gold item", q.id))
        })?;
        let gold_idx = items.index_of(gold).ok_or_else(|| Error::UnknownId {
            id: gold.to_string(),
            context: "gold item".into(),
        })?;
        let seq = embed_query(&reference, &q.tokens);
        let imp = importance_scores_corpus(
            &reference,
            &seq,
            &corpus,
            gold_idx,
            crate::gradaug::ImportanceSignal::CeGold,
        )?;
        orders.push(imp.order);
    }

    let mut out = Vec::with_capacity(intervals);
    for j in 1..=intervals {
        let variants: Vec<Circumlocution> = queries
            .iter()
            .zip(&orders)
            .map(|(q, order)| {
                let l = order.len();
                let lo = (j - 1) * l / intervals;
                let hi = j * l / intervals;
                // every other token by interval-internal rank
                let mut remove: Vec<usize> =
                    order[lo..hi].iter().step_by(2).copied().collect();
                if remove.len() == l {
                    remove.pop();
                }
                let tokens: Vec<TokenId> = q
                    .tokens
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !remove.contains(i))
                    .map(|(_, &t)| t)
                    .collect();
                Circumlocution {
                    id: q.id.clone(),
                    tokens,
                    sentences: None,
                    gold_item_id: q.gold_item_id.clone(),
                    excluded_sentences: vec![],
                }
            })
            .collect();
        let variant_set = QuerySet::from_queries(variants)?;
        let model = train(start, tset, &variant_set, items, None)?;
        let em_variant = evaluate_em(&model, eval_queries, items)?;
        out.push(IntervalAblation {
            interval: j,
            em_baseline,
            em_variant,
            em_decrease: em_baseline - em_variant,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugQualityReport {
    /// Fraction of examples whose augmented query scores a lower acc@5
    /// than the original.
    pub error_rate: f64,
    /// Mean `1 - cos(encode(C), encode(C_aug))`.
    pub mean_cosine_distance: f64,
    pub examples: usize,
}

/// Realize one seeded augmentation per query and measure relevance
/// (augmentation error rate under acc@5) and diversity (cosine distance
/// between the original and augmented query encodings).
pub fn augmentation_quality(
    model: &ModelParams,
    queries: &QuerySet,
    items: &ItemStore,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<AugQualityReport> {
    cfg.validate()?;
    let corpus = EncodedCorpus::build(model, items);
    let mut errors = 0;
    let mut dist_sum = 0.0;
    let mut n = 0;
    for q in queries.iter() {
        let gold = q.gold_item_id.as_deref().ok_or_else(|| {
            Error::Invalid(format!("query `{}` has no gold item", q.id))
        })?;
        let gold_idx = items.index_of(gold).ok_or_else(|| Error::UnknownId {
            id: gold.to_string(),
            context: "gold item".into(),
        })?;
        let seq = embed_query(model, &q.tokens);
        let eligible = match cfg.selector {
            Selector::GradBand => {
                let imp =
                    importance_scores_corpus(model, &seq, &corpus, gold_idx, cfg.importance_signal)?;
                select_band(&imp, cfg.m, cfg.n)
            }
            _ => selector_eligible(cfg.selector, None, cfg.m, cfg.n, seq.len()),
        };
        let mut rng = derive_rng(seed, &format!("aug-quality:{}", q.id), 0);
        let real = sample_realization(&seq, &eligible, cfg, &mut rng)?;
        let aug = apply_realization(&seq, &real);

        let orig_rank = retrieve_seq(model, &q.id, &seq, Some(gold), items, &corpus, items.len())?;
        let aug_rank = retrieve_seq(model, &q.id, &aug, Some(gold), items, &corpus, items.len())?;
        if recall_at(&aug_rank, gold, 5) < recall_at(&orig_rank, gold, 5) {
            errors += 1;
        }
        let v_orig = encode_query(model, &seq)?;
        let v_aug = encode_query(model, &aug)?;
        dist_sum += 1.0 - cosine(&v_orig, &v_aug);
        n += 1;
    }
    Ok(AugQualityReport {
        error_rate: errors as f64 / n.max(1) as f64,
        mean_cosine_distance: dist_sum / n.max(1) as f64,
        examples: n,
    })
}
