//! Okapi BM25 over whole-item token sequences.
//!
//! Uses the non-negative idf variant `ln(1 + (N - df + 0.5) / (df + 0.5))`
//! so tiny corpora never produce negative scores. UNK tokens are excluded
//! from both the index and query scoring (they carry no lexical identity).

use std::collections::BTreeMap;

use crate::corpus::{Circumlocution, ItemStore, RankedList, TokenId, UNK_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BM25Index {
    /// term -> postings sorted by document index, with term frequency.
    postings: BTreeMap<TokenId, Vec<(usize, usize)>>,
    doc_lengths: Vec<usize>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

/// Build an index over the whole-item token sequences (not segments).
pub fn bm25_build(items: &ItemStore, k1: f64, b: f64) -> Result<BM25Index> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot build BM25 index over empty corpus".into()));
    }
    if k1 < 0.0 || !(0.0..=1.0).contains(&b) {
        return Err(Error::Config(format!("invalid BM25 parameters k1={k1}, b={b}")));
    }
    let mut postings: BTreeMap<TokenId, Vec<(usize, usize)>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(items.len());
    for (doc, item) in items.iter().enumerate() {
        doc_lengths.push(item.tokens.len());
        let mut tf: BTreeMap<TokenId, usize> = BTreeMap::new();
        for &t in &item.tokens {
            if t != UNK_ID {
                *tf.entry(t).or_insert(0) += 1;
            }
        }
        for (t, f) in tf {
            postings.entry(t).or_default().push((doc, f));
        }
    }
    let avg_len = doc_lengths.iter().sum::<usize>() as f64 / doc_lengths.len() as f64;
    Ok(BM25Index {
        postings,
        doc_lengths,
        avg_len,
        k1,
        b,
    })
}

impl BM25Index {
    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_lengths.len() as f64;
        (1.0 + (n - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
    }

    /// Score all documents against a bag of query tokens. Each query token
    /// occurrence contributes separately (duplicates count per occurrence).
    pub fn score_tokens(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_lengths.len()];
        for &t in tokens {
            if t == UNK_ID {
                continue;
            }
            let Some(plist) = self.postings.get(&t) else {
                continue;
            };
            let idf = self.idf(plist.len());
            for &(doc, tf) in plist {
                let tf = tf as f64;
                let dl = self.doc_lengths[doc] as f64;
                let norm = tf * (self.k1 + 1.0)
                    / (tf + self.k1 * (1.0 - self.b + self.b * dl / self.avg_len));
                scores[doc] += idf * norm;
            }
        }
        scores
    }
}

/// Rank the corpus for a circumlocution. Documents sharing no query term
/// are omitted, so a query with no indexed terms yields an empty list.
pub fn bm25_rank(
    index: &BM25Index,
    items: &ItemStore,
    query: &Circumlocution,
    topn: usize,
) -> RankedList {
    let scores = index.score_tokens(&query.tokens);
    let scored: Vec<(String, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(doc, &s)| (items.get(doc).id.clone(), s))
        .collect();
    RankedList::from_scores(
        query.id.clone(),
        scored,
        topn,
        query.gold_item_id.as_deref(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Item, Vocab};

    fn store(texts: &[(&str, &str)], vocab: &Vocab) -> ItemStore {
        let items = texts
            .iter()
            .map(|(id, text)| Item::new(id.to_string(), vocab.encode(text), 32).unwrap())
            .collect();
        ItemStore::from_items(items, 32).unwrap()
    }

    fn query(vocab: &Vocab, id: &str, text: &str, gold: &str) -> Circumlocution {
        Circumlocution {
            id: id.into(),
            tokens: vocab.encode(text),
            sentences: None,
            gold_item_id: Some(gold.into()),
            excluded_sentences: vec![],
        }
    }

    #[test]
    fn avg_length_of_one_token_docs() {
        let vocab = Vocab::build(["a b c"], 1).unwrap();
        let idx = bm25_build(&store(&[("d1", "a"), ("d2", "b"), ("d3", "c")], &vocab), 1.2, 0.75)
            .unwrap();
        assert_eq!(idx.avg_len(), 1.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        let items = ItemStore::from_items(vec![], 32).unwrap();
        assert!(bm25_build(&items, 1.2, 0.75).is_err());
    }

    #[test]
    fn rebuild_is_deterministic() {
        let vocab = Vocab::build(["cat dog bird", "cat cat fish"], 1).unwrap();
        let st = store(&[("d1", "cat dog bird"), ("d2", "cat cat fish")], &vocab);
        let a = bm25_build(&st, 1.2, 0.75).unwrap();
        let b = bm25_build(&st, 1.2, 0.75).unwrap();
        let q = vocab.encode("cat fish");
        assert_eq!(a.score_tokens(&q), b.score_tokens(&q));
    }

    #[test]
    fn single_doc_single_term_closed_form() {
        // Hand computation: tf=1, dl=avgdl=1, df=1, N=1.
        // idf = ln(1 + (1-1+0.5)/(1+0.5)) = ln(4/3)
        // norm = 1*(k1+1)/(1 + k1*(1-b+b)) = 2.2/2.2 = 1
        let vocab = Vocab::build(["cat"], 1).unwrap();
        let st = store(&[("d1", "cat")], &vocab);
        let idx = bm25_build(&st, 1.2, 0.75).unwrap();
        let r = bm25_rank(&idx, &st, &query(&vocab, "q1", "cat", "d1"), 10);
        assert_eq!(r.entries.len(), 1);
        let expected = (4.0f64 / 3.0).ln();
        assert!((r.entries[0].1 - expected).abs() < 1e-12);
        assert_eq!(r.gold_rank, Some(1));
    }

    #[test]
    fn term_in_all_docs_uses_idf_floor() {
        // df = N = 2: idf = ln(1 + 0.5/2.5) = ln(1.2) > 0
        let vocab = Vocab::build(["cat dog", "cat fish"], 1).unwrap();
        let st = store(&[("d1", "cat dog"), ("d2", "cat fish")], &vocab);
        let idx = bm25_build(&st, 1.2, 0.75).unwrap();
        let scores = idx.score_tokens(&vocab.encode("cat"));
        let idf = (1.0f64 + 0.5 / 2.5).ln();
        let norm = (1.0 * 2.2) / (1.0 + 1.2 * (1.0 - 0.75 + 0.75 * 2.0 / 2.0));
        assert!((scores[0] - idf * norm).abs() < 1e-12);
        assert!(scores.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn absent_term_yields_empty_ranking() {
        let vocab = Vocab::build(["cat", "zebra"], 1).unwrap();
        let st = store(&[("d1", "cat")], &vocab);
        let idx = bm25_build(&st, 1.2, 0.75).unwrap();
        let r = bm25_rank(&idx, &st, &query(&vocab, "q1", "zebra", "d1"), 10);
        assert!(r.entries.is_empty());
        assert_eq!(r.gold_rank, None);
    }

    #[test]
    fn duplicate_query_terms_count_per_occurrence() {
        // Brute-force oracle: score of "cat cat" = 2 * score of "cat".
        let vocab = Vocab::build(["cat dog", "dog fish"], 1).unwrap();
        let st = store(&[("d1", "cat dog"), ("d2", "dog fish")], &vocab);
        let idx = bm25_build(&st, 1.2, 0.75).unwrap();
        let once = idx.score_tokens(&vocab.encode("cat"));
        let twice = idx.score_tokens(&vocab.encode("cat cat"));
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn irrelevant_doc_keeps_tf_components() {
        // Adding a doc with no query terms changes only idf (via N), which
        // shifts all matched docs monotonically; relative order of the
        // tf-normalization parts is untouched. Check the pure tf-norm parts.
        let vocab = Vocab::build(["cat cat mouse", "cat mouse mouse", "zebra lion tiger"], 1)
            .unwrap();
        let small = store(&[("d1", "cat cat mouse"), ("d2", "cat mouse mouse")], &vocab);
        let big = store(
            &[
                ("d1", "cat cat mouse"),
                ("d2", "cat mouse mouse"),
                ("d3", "zebra lion tiger"),
            ],
            &vocab,
        );
        let q = vocab.encode("cat");
        let idx_small = bm25_build(&small, 1.2, 0.75).unwrap();
        let idx_big = bm25_build(&big, 1.2, 0.75).unwrap();
        let s_small = idx_small.score_tokens(&q);
        let s_big = idx_big.score_tokens(&q);
        // same relative order of d1 vs d2
        assert_eq!(s_small[0] > s_small[1], s_big[0] > s_big[1]);
    }
}
