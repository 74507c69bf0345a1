//! Data model: tokenization, vocabulary, item/query ingestion, training
//! pairs and run-file output.
//!
//! File formats (one JSON object per line):
//! - items:   `{"id": "m1", "text": "..."}`
//! - queries: `{"id": "q1", "text": "...", "gold_id": "m1", "sentences": [...]}`
//!   where `sentences`, when present, must concatenate (whitespace-joined)
//!   back to `text`; `excluded_sentences` optionally marks sentence indices
//!   that pre-filtering removed from diagnostic studies.
//! - runs:    `qid Q0 item_id rank score tag` (ranks start at 1).

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const MASK_ID: TokenId = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<mask>"];

/// Lowercase, split on Unicode whitespace, strip leading/trailing
/// punctuation per token, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Token/id bijection with fixed specials (PAD=0, UNK=1, MASK=2).
///
/// Ids are contiguous; regular tokens are ordered by descending corpus
/// frequency with lexicographic tie-break, so the same corpus always yields
/// the same assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from an iterator of texts, keeping tokens with frequency
    /// >= `min_count`.
    pub fn build<I, S>(texts: I, min_count: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Tokenize and map to ids; unknown tokens become UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .into_iter()
            .map(|t| self.id(&t).unwrap_or(UNK_ID))
            .collect()
    }
}

/// A circumlocution: the descriptive query a speaker produces instead of
/// the target name. Sentence spans are half-open `[start, end)` ranges over
/// token indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Circumlocution {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub sentences: Option<Vec<(usize, usize)>>,
    pub gold_item_id: Option<String>,
    /// Sentence indices pre-filtered out of diagnostic studies.
    #[serde(default)]
    pub excluded_sentences: Vec<usize>,
}

impl Circumlocution {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A corpus entry, split into fixed-length segments (stride = segment
/// length, so segments tile the token sequence; the last one may be short).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub segments: Vec<(usize, usize)>,
}

impl Item {
    pub fn new(id: String, tokens: Vec<TokenId>, segment_len: usize) -> Result<Item> {
        if tokens.is_empty() {
            return Err(Error::Invalid(format!("item `{id}` has no tokens")));
        }
        if segment_len == 0 {
            return Err(Error::Config("segment_len must be >= 1".into()));
        }
        let mut segments = Vec::new();
        let mut start = 0;
        while start < tokens.len() {
            let end = (start + segment_len).min(tokens.len());
            segments.push((start, end));
            start = end;
        }
        Ok(Item {
            id,
            tokens,
            segments,
        })
    }

    pub fn segment_tokens(&self, seg: usize) -> &[TokenId] {
        let (a, b) = self.segments[seg];
        &self.tokens[a..b]
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct ItemRecord {
    id: String,
    text: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct QueryRecord {
    id: String,
    text: String,
    gold_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentences: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    excluded_sentences: Vec<usize>,
}

/// Immutable item collection; safe for concurrent reads after ingestion.
#[derive(Debug, Clone)]
pub struct ItemStore {
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
    pub segment_len: usize,
}

impl ItemStore {
    pub fn from_items(items: Vec<Item>, segment_len: usize) -> Result<ItemStore> {
        let mut by_id = HashMap::new();
        for (i, item) in items.iter().enumerate() {
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate item id `{}`", item.id)));
            }
        }
        Ok(ItemStore {
            items,
            by_id,
            segment_len,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.iter()
    }

    pub fn get(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn by_id(&self, id: &str) -> Option<&Item> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

/// Immutable query collection.
#[derive(Debug, Clone)]
pub struct QuerySet {
    queries: Vec<Circumlocution>,
    by_id: HashMap<String, usize>,
}

impl QuerySet {
    pub fn from_queries(queries: Vec<Circumlocution>) -> Result<QuerySet> {
        let mut by_id = HashMap::new();
        for (i, q) in queries.iter().enumerate() {
            if by_id.insert(q.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate query id `{}`", q.id)));
            }
        }
        Ok(QuerySet { queries, by_id })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Circumlocution> {
        self.queries.iter()
    }

    pub fn get(&self, idx: usize) -> &Circumlocution {
        &self.queries[idx]
    }

    pub fn by_id(&self, id: &str) -> Option<&Circumlocution> {
        self.by_id.get(id).map(|&i| &self.queries[i])
    }

    /// Map of query id to gold item id, for evaluation.
    pub fn gold_map(&self) -> std::collections::BTreeMap<String, String> {
        self.queries
            .iter()
            .filter_map(|q| q.gold_item_id.clone().map(|g| (q.id.clone(), g)))
            .collect()
    }
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

/// Load an items file, tokenizing with `vocab` and segmenting with
/// `segment_len` (stride = segment length).
pub fn load_items(path: &Path, vocab: &Vocab, segment_len: usize) -> Result<ItemStore> {
    let mut items = Vec::new();
    let mut seen = HashMap::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        if seen.insert(rec.id.clone(), line_no).is_some() {
            return Err(Error::DuplicateId {
                path: path.into(),
                id: rec.id,
            });
        }
        let tokens = vocab.encode(&rec.text);
        if tokens.is_empty() {
            return Err(Error::Malformed {
                path: path.into(),
                line: line_no,
                message: format!("item `{}` tokenizes to nothing", rec.id),
            });
        }
        items.push(Item::new(rec.id, tokens, segment_len)?);
    }
    ItemStore::from_items(items, segment_len)
}

/// Read the raw texts of an items file without a vocabulary (for vocabulary
/// construction).
pub fn read_item_texts(path: &Path) -> Result<Vec<String>> {
    let mut texts = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        texts.push(rec.text);
    }
    Ok(texts)
}

/// Read the raw texts of a queries file without a vocabulary.
pub fn read_query_texts(path: &Path) -> Result<Vec<String>> {
    let mut texts = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        texts.push(rec.text);
    }
    Ok(texts)
}

/// Load a queries file. When a `sentences` array is present, spans are
/// reconstructed over token indices by tokenizing each sentence
/// independently; the concatenation must match the tokenization of the full
/// text.
pub fn load_queries(path: &Path, vocab: &Vocab) -> Result<QuerySet> {
    let mut queries = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        let tokens = vocab.encode(&rec.text);
        if tokens.is_empty() {
            return Err(Error::Malformed {
                path: path.into(),
                line: line_no,
                message: format!("query `{}` tokenizes to nothing", rec.id),
            });
        }
        let sentences = match &rec.sentences {
            None => None,
            Some(sents) => {
                let mut spans = Vec::with_capacity(sents.len());
                let mut cursor = 0;
                for s in sents {
                    let n = vocab.encode(s).len();
                    spans.push((cursor, cursor + n));
                    cursor += n;
                }
                if cursor != tokens.len() {
                    return Err(Error::Malformed {
                        path: path.into(),
                        line: line_no,
                        message: format!(
                            "query `{}`: sentences tokenize to {} tokens but text has {}",
                            rec.id,
                            cursor,
                            tokens.len()
                        ),
                    });
                }
                Some(spans)
            }
        };
        queries.push(Circumlocution {
            id: rec.id,
            tokens,
            sentences,
            gold_item_id: rec.gold_id,
            excluded_sentences: rec.excluded_sentences,
        });
    }
    QuerySet::from_queries(queries)
}

/// Read only the (query id, gold id) pairs of a queries file; no
/// vocabulary needed.
pub fn read_gold_map(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let mut gold = std::collections::BTreeMap::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        let gold_id = rec.gold_id.ok_or_else(|| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: format!("query `{}` has no gold_id", rec.id),
        })?;
        gold.insert(rec.id, gold_id);
    }
    Ok(gold)
}

/// Provenance of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Augmented,
}

#[derive(Debug, Clone)]
pub struct TrainPair {
    pub query_id: String,
    pub item_id: String,
    pub provenance: Provenance,
}

/// A set of (circumlocution, positive item) pairs. Augmented pairs are
/// additional examples, never replacements for the originals.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pairs: Vec<TrainPair>,
}

impl TrainingSet {
    /// Original pairs: one per query with a gold item. Every referenced id
    /// must exist in its store.
    pub fn from_gold(queries: &QuerySet, items: &ItemStore) -> Result<TrainingSet> {
        let mut set = TrainingSet::default();
        for q in queries.iter() {
            let gold = q.gold_item_id.as_ref().ok_or_else(|| {
                Error::Invalid(format!("query `{}` has no gold item", q.id))
            })?;
            if items.by_id(gold).is_none() {
                return Err(Error::UnknownId {
                    id: gold.clone(),
                    context: format!("gold item of query `{}`", q.id),
                });
            }
            set.push(
                TrainPair {
                    query_id: q.id.clone(),
                    item_id: gold.clone(),
                    provenance: Provenance::Original,
                },
                queries,
                items,
            )?;
        }
        Ok(set)
    }

    pub fn push(&mut self, pair: TrainPair, queries: &QuerySet, items: &ItemStore) -> Result<()> {
        if queries.by_id(&pair.query_id).is_none() {
            return Err(Error::UnknownId {
                id: pair.query_id,
                context: "training pair query".into(),
            });
        }
        if items.by_id(&pair.item_id).is_none() {
            return Err(Error::UnknownId {
                id: pair.item_id,
                context: "training pair item".into(),
            });
        }
        let dup = self.pairs.iter().any(|p| {
            p.query_id == pair.query_id
                && p.item_id == pair.item_id
                && p.provenance == pair.provenance
        });
        if dup {
            return Err(Error::Invalid(format!(
                "duplicate training pair ({}, {}, {:?})",
                pair.query_id, pair.item_id, pair.provenance
            )));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[TrainPair] {
        &self.pairs
    }

    /// Distinct query ids in first-appearance order.
    pub fn query_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            if seen.insert(p.query_id.as_str()) {
                out.push(p.query_id.as_str());
            }
        }
        out
    }
}

/// One query's retrieval result: item ids with scores in non-increasing
/// order, ties broken by ascending item id. `gold_rank` is 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
    pub gold_rank: Option<usize>,
}

impl RankedList {
    /// Sort scored entries (descending score, ascending id on ties),
    /// truncate to `topn`, and record the gold rank when known.
    pub fn from_scores(
        query_id: String,
        mut scored: Vec<(String, f64)>,
        topn: usize,
        gold_id: Option<&str>,
    ) -> RankedList {
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(topn);
        let gold_rank = gold_id.and_then(|g| {
            scored
                .iter()
                .position(|(id, _)| id == g)
                .map(|p| p + 1)
        });
        RankedList {
            query_id,
            entries: scored,
            gold_rank,
        }
    }

    /// 1-based rank of `item_id`, if retrieved.
    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|(id, _)| id == item_id)
            .map(|p| p + 1)
    }

    pub fn is_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].1 >= w[1].1)
    }
}

/// Write rankings in the standard run format: `qid Q0 item_id rank score
/// tag`. Rankings must already be sorted by descending score.
pub fn write_run(rankings: &[RankedList], tag: &str, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rankings {
        if !r.is_sorted() {
            return Err(Error::Invalid(format!(
                "ranking for query `{}` is not sorted by descending score",
                r.query_id
            )));
        }
        for (rank0, (item, score)) in r.entries.iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {} {}", r.query_id, item, rank0 + 1, score, tag)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a run file back into per-query ranked lists (in file order).
pub fn read_run(path: &Path) -> Result<Vec<RankedList>> {
    let mut order: Vec<String> = Vec::new();
    let mut lists: HashMap<String, Vec<(usize, String, f64)>> = HashMap::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Malformed {
                path: path.into(),
                line: line_no,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let rank: usize = fields[3].parse().map_err(|_| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: format!("bad rank `{}`", fields[3]),
        })?;
        let score: f64 = fields[4].parse().map_err(|_| Error::Malformed {
            path: path.into(),
            line: line_no,
            message: format!("bad score `{}`", fields[4]),
        })?;
        let qid = fields[0].to_string();
        if !lists.contains_key(&qid) {
            order.push(qid.clone());
        }
        lists
            .entry(qid)
            .or_default()
            .push((rank, fields[2].to_string(), score));
    }
    let mut out = Vec::with_capacity(order.len());
    for qid in order {
        let mut entries = lists.remove(&qid).unwrap();
        entries.sort_by_key(|(rank, _, _)| *rank);
        out.push(RankedList {
            query_id: qid,
            entries: entries.into_iter().map(|(_, id, s)| (id, s)).collect(),
            gold_rank: None,
        });
    }
    Ok(out)
}

/// Write items to a JSONL file (ids and space-joined token strings).
pub fn write_items_file(path: &Path, records: &[(String, String)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, text) in records {
        let rec = ItemRecord {
            id: id.clone(),
            text: text.clone(),
        };
        let line = serde_json::to_string(&rec).expect("item record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A query record ready for serialization.
#[derive(Debug, Clone)]
pub struct QueryFileRecord {
    pub id: String,
    pub sentences: Vec<String>,
    pub gold_id: String,
}

/// Write queries to a JSONL file; `text` is the whitespace join of the
/// sentences.
pub fn write_queries_file(path: &Path, records: &[QueryFileRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let rec = QueryRecord {
            id: r.id.clone(),
            text: r.sentences.join(" "),
            gold_id: Some(r.gold_id.clone()),
            sentences: Some(r.sentences.clone()),
            excluded_sentences: Vec::new(),
        };
        let line = serde_json::to_string(&rec).expect("query record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
