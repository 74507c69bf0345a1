//! Rank metrics for known-item retrieval: nDCG, nDCG@10, recall@1 (exact
//! match), acc@5, MRR, and report assembly.
//!
//! Relevance is binary with a single gold item per query, so every metric
//! reduces to a function of the gold's 1-based rank; an unretrieved gold
//! contributes 0 to all of them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::RankedList;
use crate::error::{Error, Result};

/// nDCG with binary single-gold relevance: `1 / log2(1 + rank)` when the
/// gold is retrieved within the cutoff, else 0. The ideal DCG is 1.
pub fn ndcg(ranked: &RankedList, gold_id: &str, cutoff: Option<usize>) -> f64 {
    match ranked.rank_of(gold_id) {
        Some(r) if cutoff.map_or(true, |c| r <= c) => 1.0 / ((1 + r) as f64).log2(),
        _ => 0.0,
    }
}

/// Mean reciprocal rank contribution for one query: `1 / rank`, 0 if the
/// gold is unretrieved.
pub fn mrr(ranked: &RankedList, gold_id: &str) -> f64 {
    match ranked.rank_of(gold_id) {
        Some(r) => 1.0 / r as f64,
        None => 0.0,
    }
}

/// 1.0 when the gold appears within the top `k`, else 0.0. `recall_at(_, _, 1)`
/// is exact match; `recall_at(_, _, 5)` is acc@5.
pub fn recall_at(ranked: &RankedList, gold_id: &str, k: usize) -> f64 {
    match ranked.rank_of(gold_id) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Metric values for one query (or the mean over queries).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricValues {
    pub ndcg: f64,
    pub ndcg_at_10: f64,
    /// recall@1, i.e. exact match.
    pub em: f64,
    /// recall@5.
    pub acc_at_5: f64,
    pub mrr: f64,
}

impl MetricValues {
    fn from_rank_list(ranked: &RankedList, gold_id: &str) -> MetricValues {
        MetricValues {
            ndcg: ndcg(ranked, gold_id, None),
            ndcg_at_10: ndcg(ranked, gold_id, Some(10)),
            em: recall_at(ranked, gold_id, 1),
            acc_at_5: recall_at(ranked, gold_id, 5),
            mrr: mrr(ranked, gold_id),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub query_count: usize,
    pub mean: MetricValues,
    pub per_query: BTreeMap<String, MetricValues>,
}

impl MetricsReport {
    /// One line per metric, fixed precision, suitable for terminals and
    /// diffs.
    pub fn to_text(&self) -> String {
        let m = &self.mean;
        format!(
            "queries    {}\nndcg       {:.6}\nndcg@10    {:.6}\nem         {:.6}\nacc@5      {:.6}\nmrr        {:.6}\n",
            self.query_count, m.ndcg, m.ndcg_at_10, m.em, m.acc_at_5, m.mrr
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluate rankings against a gold map. The gold map defines the query
/// universe: queries without a ranking score 0 on every metric, and a
/// ranking whose query id has no gold entry is an error.
pub fn evaluate(rankings: &[RankedList], gold: &BTreeMap<String, String>) -> Result<MetricsReport> {
    let mut by_qid: BTreeMap<&str, &RankedList> = BTreeMap::new();
    for r in rankings {
        if !gold.contains_key(&r.query_id) {
            return Err(Error::UnknownId {
                id: r.query_id.clone(),
                context: "run query without a gold entry".into(),
            });
        }
        by_qid.insert(r.query_id.as_str(), r);
    }
    let mut per_query = BTreeMap::new();
    let mut sum = MetricValues::default();
    for (qid, gold_id) in gold {
        let vals = match by_qid.get(qid.as_str()) {
            Some(r) => MetricValues::from_rank_list(r, gold_id),
            None => MetricValues::default(),
        };
        sum.ndcg += vals.ndcg;
        sum.ndcg_at_10 += vals.ndcg_at_10;
        sum.em += vals.em;
        sum.acc_at_5 += vals.acc_at_5;
        sum.mrr += vals.mrr;
        per_query.insert(qid.clone(), vals);
    }
    let n = gold.len().max(1) as f64;
    let mean = MetricValues {
        ndcg: sum.ndcg / n,
        ndcg_at_10: sum.ndcg_at_10 / n,
        em: sum.em / n,
        acc_at_5: sum.acc_at_5 / n,
        mrr: sum.mrr / n,
    };
    Ok(MetricsReport {
        query_count: gold.len(),
        mean,
        per_query,
    })
}

/// Evaluate a run file against a gold map.
pub fn evaluate_run_file(path: &Path, gold: &BTreeMap<String, String>) -> Result<MetricsReport> {
    let rankings = crate::corpus::read_run(path)?;
    evaluate(&rankings, gold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked(ids: &[&str]) -> RankedList {
        RankedList {
            query_id: "q1".into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), 1.0 - i as f64 * 0.01))
                .collect(),
            gold_rank: None,
        }
    }

    #[test]
    fn gold_at_rank_1() {
        let r = ranked(&["g", "a", "b"]);
        assert_eq!(ndcg(&r, "g", None), 1.0);
        assert_eq!(mrr(&r, "g"), 1.0);
        assert_eq!(recall_at(&r, "g", 1), 1.0);
    }

    #[test]
    fn gold_at_rank_3_ndcg_half() {
        let r = ranked(&["a", "b", "g"]);
        assert!((ndcg(&r, "g", None) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cutoff_zeroes_deep_gold() {
        let ids: Vec<String> = (0..10).map(|i| format!("a{i}")).collect();
        let mut all: Vec<&str> = ids.iter().map(String::as_str).collect();
        all.push("g");
        let r = ranked(&all);
        assert_eq!(ndcg(&r, "g", Some(10)), 0.0);
        assert!(ndcg(&r, "g", None) > 0.0);
    }

    #[test]
    fn mrr_and_acc5() {
        let r = ranked(&["a", "b", "c", "g"]);
        assert!((mrr(&r, "g") - 0.25).abs() < 1e-12);
        let r5 = ranked(&["a", "b", "c", "d", "g"]);
        assert_eq!(recall_at(&r5, "g", 5), 1.0);
        assert_eq!(recall_at(&r5, "g", 1), 0.0);
    }

    #[test]
    fn all_golds_rank_one_gives_all_ones() {
        let rankings = vec![
            RankedList {
                query_id: "q1".into(),
                entries: vec![("g1".into(), 1.0)],
                gold_rank: None,
            },
            RankedList {
                query_id: "q2".into(),
                entries: vec![("g2".into(), 1.0)],
                gold_rank: None,
            },
        ];
        let gold: BTreeMap<String, String> = [("q1", "g1"), ("q2", "g2")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let report = evaluate(&rankings, &gold).unwrap();
        assert_eq!(report.mean.ndcg, 1.0);
        assert_eq!(report.mean.em, 1.0);
        assert_eq!(report.mean.mrr, 1.0);
    }

    #[test]
    fn missing_ranking_counts_as_zero() {
        let gold: BTreeMap<String, String> =
            [("q1".to_string(), "g1".to_string()), ("q2".to_string(), "g2".to_string())]
                .into_iter()
                .collect();
        let rankings = vec![RankedList {
            query_id: "q1".into(),
            entries: vec![("g1".into(), 1.0)],
            gold_rank: None,
        }];
        let report = evaluate(&rankings, &gold).unwrap();
        assert_eq!(report.query_count, 2);
        assert!((report.mean.em - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_run_qid_is_error() {
        let gold: BTreeMap<String, String> = BTreeMap::new();
        let rankings = vec![ranked(&["a"])];
        let err = evaluate(&rankings, &gold).unwrap_err();
        assert!(err.to_string().contains("q1"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Improving the gold rank never decreases any metric.
            #[test]
            fn rank_monotonicity(rank in 1usize..50) {
                let better: Vec<String> = (0..rank).map(|i| format!("a{i:02}")).collect();
                let mut ids_better: Vec<&str> = better.iter().map(String::as_str).collect();
                let mut ids_worse = ids_better.clone();
                ids_better.insert(rank - 1, "g");
                ids_worse.push("g");
                let rb = ranked(&ids_better);
                let rw = ranked(&ids_worse);
                prop_assert!(ndcg(&rb, "g", None) >= ndcg(&rw, "g", None));
                prop_assert!(ndcg(&rb, "g", Some(10)) >= ndcg(&rw, "g", Some(10)));
                prop_assert!(mrr(&rb, "g") >= mrr(&rw, "g"));
                prop_assert!(recall_at(&rb, "g", 1) >= recall_at(&rw, "g", 1));
                prop_assert!(recall_at(&rb, "g", 5) >= recall_at(&rw, "g", 5));
            }

            /// nDCG without cutoff dominates nDCG@10; acc@5 dominates EM.
            #[test]
            fn cutoff_dominance(rank in 1usize..50) {
                let fill: Vec<String> = (0..rank - 1).map(|i| format!("a{i:02}")).collect();
                let mut ids: Vec<&str> = fill.iter().map(String::as_str).collect();
                ids.push("g");
                let r = ranked(&ids);
                prop_assert!(ndcg(&r, "g", None) >= ndcg(&r, "g", Some(10)));
                prop_assert!(recall_at(&r, "g", 5) >= recall_at(&r, "g", 1));
            }
        }
    }
}
