//! Trainable dual encoder with exact reverse-mode gradients, including
//! gradients with respect to the input token embeddings.
//!
//! Architecture: token embedding table, coherence-weighted pooling over the
//! token rows, and a two-layer tanh tower per side (query/item). Pooling
//! weights are `softmax(tau * <row_i, mean>)` with `tau` initialized to 0,
//! so an untrained model pools with the exact masked mean; training moves
//! `tau` and the per-token pooling Jacobian is what makes input-gradient
//! magnitudes differ across tokens. Query-item scores use MaxSim: the
//! maximum dot product over the item's segment vectors.

mod backward;
mod checkpoint;
mod train;

pub use backward::{
    batch_ce_backward, batch_ce_forward, batch_ce_forward_seqs, BatchCe, Gradients,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{assemble_batches, train, ResolvedPair};

/// Crate-internal backward-pass machinery shared with the augmentation
/// module.
pub(crate) mod internal {
    pub(crate) use super::backward::{
        backward_block, backward_items, forward_block, logsumexp, softmax, tower_backward,
        validate_batch, zero_item_dv, ScoredBlock,
    };
    pub(crate) use super::{encode_item_full, encode_with_tower, ItemEnc};
}

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Circumlocution, Item, ItemStore, RankedList, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::util::derive_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub segment_len: usize,
    /// Share one embedding table between towers (tiny-vocab regimes overfit
    /// with separate tables).
    pub share_embedding: bool,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 64,
            segment_len: 32,
            share_embedding: true,
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed_dim and hidden_dim must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 (in-batch negatives need at least one negative)".into(),
            ));
        }
        if self.segment_len == 0 {
            return Err(Error::Config("segment_len must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// One encoding tower: coherence pooling temperature plus two affine layers
/// with a tanh between (d -> h -> d).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tower {
    pub pool_tau: f64,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Tower {
    fn zeros(embed_dim: usize, hidden_dim: usize) -> Tower {
        Tower {
            pool_tau: 0.0,
            w1: Array2::zeros((hidden_dim, embed_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((embed_dim, hidden_dim)),
            b2: Array1::zeros(embed_dim),
        }
    }
}

/// All trainable tensors of the dual encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet {
    pub embedding: Array2<f64>,
    /// Present only when the towers do not share the embedding table.
    pub item_embedding: Option<Array2<f64>>,
    pub query_tower: Tower,
    pub item_tower: Tower,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            item_embedding: self
                .item_embedding
                .as_ref()
                .map(|e| Array2::zeros(e.raw_dim())),
            query_tower: Tower::zeros(self.query_tower.w1.ncols(), self.query_tower.w1.nrows()),
            item_tower: Tower::zeros(self.item_tower.w1.ncols(), self.item_tower.w1.nrows()),
        }
    }

    pub fn n_params(&self) -> usize {
        self.to_flat().len()
    }

    /// Flatten every parameter scalar in a fixed order (embedding,
    /// item embedding, query tower, item tower; within a tower: tau, w1,
    /// b1, w2, b2).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.embedding.iter());
        if let Some(e) = &self.item_embedding {
            out.extend(e.iter());
        }
        for t in [&self.query_tower, &self.item_tower] {
            out.push(t.pool_tau);
            out.extend(t.w1.iter());
            out.extend(t.b1.iter());
            out.extend(t.w2.iter());
            out.extend(t.b2.iter());
        }
        out
    }

    /// Inverse of [`ParamSet::to_flat`]; panics if the length differs.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self.embedding.iter_mut() {
            *v = it.next().expect("flat length");
        }
        if let Some(e) = &mut self.item_embedding {
            for v in e.iter_mut() {
                *v = it.next().expect("flat length");
            }
        }
        for t in [&mut self.query_tower, &mut self.item_tower] {
            t.pool_tau = it.next().expect("flat length");
            for v in t.w1.iter_mut() {
                *v = it.next().expect("flat length");
            }
            for v in t.b1.iter_mut() {
                *v = it.next().expect("flat length");
            }
            for v in t.w2.iter_mut() {
                *v = it.next().expect("flat length");
            }
            for v in t.b2.iter_mut() {
                *v = it.next().expect("flat length");
            }
        }
        assert!(it.next().is_none(), "flat vector longer than parameter set");
    }

    fn item_table(&self) -> &Array2<f64> {
        self.item_embedding.as_ref().unwrap_or(&self.embedding)
    }
}

/// Model parameters plus the frozen initial snapshot used to re-seed the
/// student, and the vocabulary the embedding table is indexed by.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub initial: ParamSet,
}

/// Initialize parameters: weights uniform in (-a, a) with
/// `a = sqrt(6 / (fan_in + fan_out))`, biases and pooling temperatures
/// zero. Deterministic given the seed; the initial snapshot is stored.
pub fn init_params(config: &ModelConfig, vocab: &Vocab) -> Result<ModelParams> {
    config.validate()?;
    if vocab.len() == 0 {
        return Err(Error::Config("empty vocabulary".into()));
    }
    let d = config.embed_dim;
    let h = config.hidden_dim;
    let mut rng = derive_rng(config.seed, "init", 0);
    let mut uniform = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * a)
    };
    let embedding = uniform(vocab.len(), d, d, d);
    let item_embedding = if config.share_embedding {
        None
    } else {
        Some(uniform(vocab.len(), d, d, d))
    };
    let tower = |uniform: &mut dyn FnMut(usize, usize, usize, usize) -> Array2<f64>| Tower {
        pool_tau: 0.0,
        w1: uniform(h, d, d, h),
        b1: Array1::zeros(h),
        w2: uniform(d, h, h, d),
        b2: Array1::zeros(d),
    };
    let query_tower = tower(&mut uniform);
    let item_tower = tower(&mut uniform);
    let params = ParamSet {
        embedding,
        item_embedding,
        query_tower,
        item_tower,
    };
    Ok(ModelParams {
        config: config.clone(),
        vocab: vocab.clone(),
        initial: params.clone(),
        params,
    })
}

impl ModelParams {
    /// A fresh model re-seeded from the frozen initial snapshot.
    pub fn reinitialized(&self) -> ModelParams {
        ModelParams {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.initial.clone(),
            initial: self.initial.clone(),
        }
    }
}

/// The input embedding matrix of one circumlocution: one row per token,
/// with an optional per-row deletion mask. Augmentation mutates `rows`
/// (replacement noise) or `mask` (deletion); token ids stay aligned so
/// gradients can flow back to the table.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub token_ids: Vec<TokenId>,
    pub rows: Array2<f64>,
    pub mask: Vec<bool>,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }
}

/// Look up the query-side embedding rows for a token sequence.
pub fn embed_query(params: &ModelParams, tokens: &[TokenId]) -> EmbeddingSequence {
    let d = params.config.embed_dim;
    let mut rows = Array2::zeros((tokens.len(), d));
    for (i, &t) in tokens.iter().enumerate() {
        rows.row_mut(i).assign(&params.params.embedding.row(t));
    }
    EmbeddingSequence {
        token_ids: tokens.to_vec(),
        rows,
        mask: vec![false; tokens.len()],
    }
}

/// Forward cache of one tower application (pooling plus both affine
/// layers).
#[derive(Debug, Clone)]
pub(crate) struct EncCache {
    pub active: Vec<usize>,
    pub weights: Vec<f64>,
    pub cbar: Array1<f64>,
    pub pool: Array1<f64>,
    pub t: Array1<f64>,
    pub out: Array1<f64>,
}

pub(crate) fn encode_with_tower(
    tower: &Tower,
    rows: &ArrayView2<f64>,
    mask: Option<&[bool]>,
) -> Result<EncCache> {
    let l = rows.nrows();
    let active: Vec<usize> = match mask {
        Some(m) => (0..l).filter(|&i| !m[i]).collect(),
        None => (0..l).collect(),
    };
    if active.is_empty() {
        return Err(Error::Invalid("fully deleted query".into()));
    }
    let n = active.len() as f64;
    let d = rows.ncols();
    let mut cbar = Array1::<f64>::zeros(d);
    for &i in &active {
        cbar += &rows.row(i);
    }
    cbar /= n;
    // softmax over tau * <row_i, cbar>; tau = 0 gives the exact masked mean
    let logits: Vec<f64> = active.iter().map(|&i| tower.pool_tau * rows.row(i).dot(&cbar)).collect();
    let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|z| (z - zmax).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    let mut pool = Array1::<f64>::zeros(d);
    for (k, &i) in active.iter().enumerate() {
        pool.scaled_add(weights[k], &rows.row(i));
    }
    let a1 = tower.w1.dot(&pool) + &tower.b1;
    let t = a1.mapv(f64::tanh);
    let out = tower.w2.dot(&t) + &tower.b2;
    Ok(EncCache {
        active,
        weights,
        cbar,
        pool,
        t,
        out,
    })
}

/// Encode a circumlocution into a query vector. The optional mask deletes
/// token rows (they contribute neither to pooling nor to gradients).
pub fn encode_query(params: &ModelParams, seq: &EmbeddingSequence) -> Result<Array1<f64>> {
    let cache = encode_with_tower(&params.params.query_tower, &seq.rows.view(), Some(&seq.mask))?;
    Ok(cache.out)
}

/// Convenience: query vector straight from token ids.
pub fn query_vector(params: &ModelParams, tokens: &[TokenId]) -> Result<Array1<f64>> {
    encode_query(params, &embed_query(params, tokens))
}

/// Full forward state of one encoded item (all segments), kept for
/// training backward passes.
#[derive(Debug, Clone)]
pub(crate) struct ItemEnc {
    pub rows: Vec<Array2<f64>>,
    pub caches: Vec<EncCache>,
}

impl ItemEnc {
    pub fn vecs(&self) -> Vec<Array1<f64>> {
        self.caches.iter().map(|c| c.out.clone()).collect()
    }
}

pub(crate) fn encode_item_full(params: &ModelParams, item: &Item) -> ItemEnc {
    let d = params.config.embed_dim;
    let table = params.params.item_table();
    let mut rows_all = Vec::with_capacity(item.segments.len());
    let mut caches = Vec::with_capacity(item.segments.len());
    for seg in 0..item.segments.len() {
        let toks = item.segment_tokens(seg);
        let mut rows = Array2::zeros((toks.len(), d));
        for (i, &t) in toks.iter().enumerate() {
            rows.row_mut(i).assign(&table.row(t));
        }
        let cache = encode_with_tower(&params.params.item_tower, &rows.view(), None)
            .expect("items have at least one token per segment");
        rows_all.push(rows);
        caches.push(cache);
    }
    ItemEnc {
        rows: rows_all,
        caches,
    }
}

/// Encode an item into one vector per segment.
pub fn encode_item(params: &ModelParams, item: &Item) -> Vec<Array1<f64>> {
    encode_item_full(params, item).vecs()
}

/// MaxSim: maximum dot product over the item's segment vectors. Returns
/// the score and the argmax segment index (ties resolve to the lowest
/// index).
pub fn score(query: &Array1<f64>, item_vecs: &[Array1<f64>]) -> (f64, usize) {
    debug_assert!(!item_vecs.is_empty());
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, v) in item_vecs.iter().enumerate() {
        let s = query.dot(v);
        if s > best {
            best = s;
            best_idx = i;
        }
    }
    (best, best_idx)
}

/// Precomputed segment vectors for a whole item store, for retrieval over
/// a frozen parameter snapshot.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub vecs: Vec<Vec<Array1<f64>>>,
}

impl EncodedCorpus {
    pub fn build(params: &ModelParams, store: &ItemStore) -> EncodedCorpus {
        EncodedCorpus {
            vecs: store.iter().map(|item| encode_item(params, item)).collect(),
        }
    }
}

/// Rank the whole corpus for a query embedding sequence.
pub fn retrieve_seq(
    params: &ModelParams,
    query_id: &str,
    seq: &EmbeddingSequence,
    gold_id: Option<&str>,
    store: &ItemStore,
    corpus: &EncodedCorpus,
    topn: usize,
) -> Result<RankedList> {
    let q = encode_query(params, seq)?;
    let scored: Vec<(String, f64)> = corpus
        .vecs
        .iter()
        .enumerate()
        .map(|(i, vecs)| (store.get(i).id.clone(), score(&q, vecs).0))
        .collect();
    Ok(RankedList::from_scores(
        query_id.to_string(),
        scored,
        topn,
        gold_id,
    ))
}

/// Rank the whole corpus for a raw token sequence.
pub fn retrieve_tokens(
    params: &ModelParams,
    query_id: &str,
    tokens: &[TokenId],
    gold_id: Option<&str>,
    store: &ItemStore,
    corpus: &EncodedCorpus,
    topn: usize,
) -> Result<RankedList> {
    let seq = embed_query(params, tokens);
    retrieve_seq(params, query_id, &seq, gold_id, store, corpus, topn)
}

/// MaxSim retrieval over all items; the gold rank is filled when the query
/// carries a gold id.
pub fn retrieve(
    params: &ModelParams,
    query: &Circumlocution,
    store: &ItemStore,
    corpus: &EncodedCorpus,
    topn: usize,
) -> Result<RankedList> {
    retrieve_tokens(
        params,
        &query.id,
        &query.tokens,
        query.gold_item_id.as_deref(),
        store,
        corpus,
        topn,
    )
}

/// Cosine similarity between two vectors (0 when either is all-zero).
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;

    fn tiny_model(seed: u64) -> ModelParams {
        let vocab = Vocab::build(["alpha beta gamma delta epsilon zeta"], 1).unwrap();
        let config = ModelConfig {
            embed_dim: 8,
            hidden_dim: 6,
            segment_len: 4,
            seed,
            ..ModelConfig::default()
        };
        init_params(&config, &vocab).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = tiny_model(1);
        let b = tiny_model(1);
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        let c = tiny_model(2);
        assert_ne!(a.params.to_flat(), c.params.to_flat());
    }

    #[test]
    fn initial_snapshot_matches_at_init() {
        let m = tiny_model(3);
        assert_eq!(m.params.to_flat(), m.initial.to_flat());
    }

    #[test]
    fn flat_round_trip() {
        let m = tiny_model(4);
        let flat = m.params.to_flat();
        let mut copy = m.params.zeros_like();
        copy.assign_from_flat(&flat);
        assert_eq!(copy.to_flat(), flat);
    }

    #[test]
    fn single_token_pools_to_its_row() {
        let m = tiny_model(5);
        let seq = embed_query(&m, &[3]);
        let cache =
            encode_with_tower(&m.params.query_tower, &seq.rows.view(), Some(&seq.mask)).unwrap();
        for (a, b) in cache.pool.iter().zip(seq.rows.row(0).iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn duplicate_token_mean_property() {
        let m = tiny_model(6);
        let once = query_vector(&m, &[4]).unwrap();
        let twice = query_vector(&m, &[4, 4]).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let m = tiny_model(7);
        let a = query_vector(&m, &[3, 4, 5]).unwrap();
        let b = query_vector(&m, &[5, 3, 4]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_query_errors() {
        let m = tiny_model(8);
        let mut seq = embed_query(&m, &[3, 4]);
        seq.mask = vec![true, true];
        let err = encode_query(&m, &seq).unwrap_err();
        assert!(err.to_string().contains("fully deleted"));
    }

    #[test]
    fn maxsim_takes_max_and_lowest_tie_index() {
        let q = ndarray::arr1(&[1.0, 0.0]);
        let vecs = vec![
            ndarray::arr1(&[0.2, 0.0]),
            ndarray::arr1(&[0.9, 0.0]),
            ndarray::arr1(&[-1.0, 0.0]),
        ];
        let (s, idx) = score(&q, &vecs);
        assert_eq!(s, 0.9);
        assert_eq!(idx, 1);
        let tied = vec![ndarray::arr1(&[0.9, 0.0]), ndarray::arr1(&[0.9, 0.0])];
        assert_eq!(score(&q, &tied).1, 0);
    }

    #[test]
    fn maxsim_dominance_appending_segment() {
        let q = ndarray::arr1(&[1.0, 2.0]);
        let mut vecs = vec![ndarray::arr1(&[0.5, -0.25])];
        let before = score(&q, &vecs).0;
        vecs.push(ndarray::arr1(&[-3.0, -3.0]));
        assert!(score(&q, &vecs).0 >= before);
        vecs.push(ndarray::arr1(&[5.0, 5.0]));
        assert!(score(&q, &vecs).0 > before);
    }

    #[test]
    fn identical_segments_identical_vectors() {
        let m = tiny_model(9);
        let item = Item::new("m1".into(), vec![3, 4, 3, 4], 2).unwrap();
        let vecs = encode_item(&m, &item);
        assert_eq!(vecs.len(), 2);
        for (a, b) in vecs[0].iter().zip(vecs[1].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieve_single_item_corpus() {
        let m = tiny_model(10);
        let store = ItemStore::from_items(
            vec![Item::new("m1".into(), vec![3, 4], 4).unwrap()],
            4,
        )
        .unwrap();
        let corpus = EncodedCorpus::build(&m, &store);
        let q = Circumlocution {
            id: "q1".into(),
            tokens: vec![5],
            sentences: None,
            gold_item_id: Some("m1".into()),
            excluded_sentences: vec![],
        };
        let r = retrieve(&m, &q, &store, &corpus, 10).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.gold_rank, Some(1));
    }

    #[test]
    fn retrieve_matches_bruteforce_rescoring() {
        let m = tiny_model(11);
        let items: Vec<Item> = (0..5)
            .map(|i| Item::new(format!("m{i}"), vec![3 + (i % 3), 4, 5], 2).unwrap())
            .collect();
        let store = ItemStore::from_items(items, 2).unwrap();
        let corpus = EncodedCorpus::build(&m, &store);
        let q = Circumlocution {
            id: "q1".into(),
            tokens: vec![3, 5],
            sentences: None,
            gold_item_id: None,
            excluded_sentences: vec![],
        };
        let r = retrieve(&m, &q, &store, &corpus, 10).unwrap();
        // brute force: rescore every item independently and sort
        let qv = query_vector(&m, &q.tokens).unwrap();
        let mut brute: Vec<(String, f64)> = store
            .iter()
            .map(|item| {
                let vecs = encode_item(&m, item);
                let best = vecs
                    .iter()
                    .map(|v| qv.dot(v))
                    .fold(f64::NEG_INFINITY, f64::max);
                (item.id.clone(), best)
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got: Vec<&str> = r.entries.iter().map(|(id, _)| id.as_str()).collect();
        let want: Vec<&str> = brute.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn topn_larger_than_corpus_returns_everything() {
        let m = tiny_model(12);
        let items: Vec<Item> = (0..3)
            .map(|i| Item::new(format!("m{i}"), vec![3 + i], 4).unwrap())
            .collect();
        let store = ItemStore::from_items(items, 4).unwrap();
        let corpus = EncodedCorpus::build(&m, &store);
        let q = Circumlocution {
            id: "q1".into(),
            tokens: vec![3],
            sentences: None,
            gold_item_id: None,
            excluded_sentences: vec![],
        };
        let r = retrieve(&m, &q, &store, &corpus, 100).unwrap();
        assert_eq!(r.entries.len(), 3);
    }
}
