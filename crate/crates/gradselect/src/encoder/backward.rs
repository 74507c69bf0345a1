//! Exact reverse-mode gradients for the dual encoder.
//!
//! Everything is hand-derived and accumulated in a fixed order. The MaxSim
//! max routes gradient to the argmax segment only (ties to the lowest
//! segment index), and deleted token rows receive zero gradient through the
//! pooling.

use ndarray::{Array1, Array2, ArrayView2};

use crate::corpus::Item;
use crate::error::{Error, Result};

use super::{
    encode_item_full, encode_with_tower, embed_query, EmbeddingSequence, EncCache, ItemEnc,
    ModelParams, ParamSet, Tower,
};
use crate::corpus::Circumlocution;

/// Gradients for every parameter tensor plus the per-token input-embedding
/// gradients of each query in the batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    /// One `l x d` matrix per batch query; masked rows are zero.
    pub query_input: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros(model: &ModelParams) -> Gradients {
        Gradients {
            params: model.params.zeros_like(),
            query_input: Vec::new(),
        }
    }
}

/// Backward through one tower application. `gout` is the loss gradient at
/// the tower output; parameter gradients accumulate into `tg` and input-row
/// gradients into `grows` (masked rows stay untouched).
pub(crate) fn tower_backward(
    tower: &Tower,
    rows: &ArrayView2<f64>,
    cache: &EncCache,
    gout: &Array1<f64>,
    tg: &mut Tower,
    grows: &mut Array2<f64>,
) {
    // out = w2 t + b2
    tg.b2 += gout;
    for (i, &g) in gout.iter().enumerate() {
        tg.w2.row_mut(i).scaled_add(g, &cache.t);
    }
    let dt = tower.w2.t().dot(gout);
    // t = tanh(a1)
    let da1 = &dt * &cache.t.mapv(|x| 1.0 - x * x);
    tg.b1 += &da1;
    for (i, &g) in da1.iter().enumerate() {
        tg.w1.row_mut(i).scaled_add(g, &cache.pool);
    }
    let gpool = tower.w1.t().dot(&da1);

    // pool = sum_k w_k row_k with w = softmax(tau * <row_k, cbar>),
    // cbar the mean of active rows.
    let n = cache.active.len() as f64;
    let s: Vec<f64> = cache
        .active
        .iter()
        .map(|&i| rows.row(i).dot(&gpool))
        .collect();
    let sw: f64 = cache.weights.iter().zip(&s).map(|(w, si)| w * si).sum();
    let dz: Vec<f64> = cache
        .weights
        .iter()
        .zip(&s)
        .map(|(w, si)| w * (si - sw))
        .collect();
    let mut gtau = 0.0;
    for (k, &i) in cache.active.iter().enumerate() {
        gtau += dz[k] * rows.row(i).dot(&cache.cbar);
    }
    tg.pool_tau += gtau;
    // every active row also enters each logit through cbar
    let mut common = Array1::<f64>::zeros(rows.ncols());
    for (k, &i) in cache.active.iter().enumerate() {
        common.scaled_add(dz[k], &rows.row(i));
    }
    common *= tower.pool_tau / n;
    for (k, &i) in cache.active.iter().enumerate() {
        let mut gr = grows.row_mut(i);
        gr.scaled_add(cache.weights[k], &gpool);
        gr.scaled_add(tower.pool_tau * dz[k], &cache.cbar);
        gr += &common;
    }
}

/// Queries scored against items: the score matrix, per-pair argmax
/// segments, and the query forward caches.
#[derive(Debug, Clone)]
pub(crate) struct ScoredBlock {
    pub q: Vec<EncCache>,
    pub scores: Array2<f64>,
    pub argmax: Vec<Vec<usize>>,
}

pub(crate) fn forward_block(
    params: &ModelParams,
    seqs: &[EmbeddingSequence],
    items: &[ItemEnc],
) -> Result<ScoredBlock> {
    let nq = seqs.len();
    let ni = items.len();
    let mut q = Vec::with_capacity(nq);
    for seq in seqs {
        q.push(encode_with_tower(
            &params.params.query_tower,
            &seq.rows.view(),
            Some(&seq.mask),
        )?);
    }
    let mut scores = Array2::<f64>::zeros((nq, ni));
    let mut argmax = vec![vec![0usize; ni]; nq];
    for (qi, qc) in q.iter().enumerate() {
        for (ii, item) in items.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_seg = 0;
            for (seg, cache) in item.caches.iter().enumerate() {
                let s = qc.out.dot(&cache.out);
                if s > best {
                    best = s;
                    best_seg = seg;
                }
            }
            scores[(qi, ii)] = best;
            argmax[qi][ii] = best_seg;
        }
    }
    Ok(ScoredBlock { q, scores, argmax })
}

/// Backward from score-matrix gradients `ds` through the queries of one
/// block. Item segment-vector gradients accumulate into `item_dv` so that
/// several blocks sharing the same item encodings can be combined before
/// [`backward_items`]. When `input_sink` is given, each query's input-row
/// gradient matrix is appended to it.
pub(crate) fn backward_block(
    params: &ModelParams,
    seqs: &[EmbeddingSequence],
    block: &ScoredBlock,
    items: &[ItemEnc],
    ds: &Array2<f64>,
    grads: &mut Gradients,
    item_dv: &mut [Vec<Array1<f64>>],
    mut input_sink: Option<&mut Vec<Array2<f64>>>,
) {
    let d = params.config.embed_dim;
    for (qi, seq) in seqs.iter().enumerate() {
        let qc = &block.q[qi];
        let mut gq = Array1::<f64>::zeros(d);
        for (ii, item) in items.iter().enumerate() {
            let g = ds[(qi, ii)];
            if g == 0.0 {
                continue;
            }
            let seg = block.argmax[qi][ii];
            gq.scaled_add(g, &item.caches[seg].out);
            item_dv[ii][seg].scaled_add(g, &qc.out);
        }
        let mut grows = Array2::<f64>::zeros((seq.len(), d));
        tower_backward(
            &params.params.query_tower,
            &seq.rows.view(),
            qc,
            &gq,
            &mut grads.params.query_tower,
            &mut grows,
        );
        for (pos, &tid) in seq.token_ids.iter().enumerate() {
            if !seq.mask[pos] {
                let mut dst = grads.params.embedding.row_mut(tid);
                dst += &grows.row(pos);
            }
        }
        if let Some(sink) = input_sink.as_deref_mut() {
            sink.push(grows);
        }
    }
}

/// Backward through the item encodings given accumulated segment-vector
/// gradients.
pub(crate) fn backward_items(
    params: &ModelParams,
    batch_items: &[&Item],
    items: &[ItemEnc],
    item_dv: &[Vec<Array1<f64>>],
    grads: &mut Gradients,
) {
    let d = params.config.embed_dim;
    let separate = params.params.item_embedding.is_some();
    for (ii, item_enc) in items.iter().enumerate() {
        let item = batch_items[ii];
        for (seg, dv) in item_dv[ii].iter().enumerate() {
            if dv.iter().all(|&x| x == 0.0) {
                continue;
            }
            let rows = &item_enc.rows[seg];
            let mut grows = Array2::<f64>::zeros((rows.nrows(), d));
            tower_backward(
                &params.params.item_tower,
                &rows.view(),
                &item_enc.caches[seg],
                dv,
                &mut grads.params.item_tower,
                &mut grows,
            );
            let table = if separate {
                grads.params.item_embedding.as_mut().unwrap()
            } else {
                &mut grads.params.embedding
            };
            for (pos, &tid) in item.segment_tokens(seg).iter().enumerate() {
                let mut dst = table.row_mut(tid);
                dst += &grows.row(pos);
            }
        }
    }
}

pub(crate) fn zero_item_dv(items: &[ItemEnc], d: usize) -> Vec<Vec<Array1<f64>>> {
    items
        .iter()
        .map(|it| it.caches.iter().map(|_| Array1::zeros(d)).collect())
        .collect()
}

/// Log-sum-exp with max subtraction.
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Forward state of an in-batch-negative cross-entropy batch: queries
/// scored against the batch's gold items, softmax distributions and the
/// mean cross-entropy of each query's own gold (aligned by position).
#[derive(Debug)]
pub struct BatchCe {
    pub loss: f64,
    /// Per-query candidate distribution over the batch items.
    pub probs: Vec<Vec<f64>>,
    pub(crate) seqs: Vec<EmbeddingSequence>,
    pub(crate) items_enc: Vec<ItemEnc>,
    pub(crate) block: ScoredBlock,
}

fn ce_from_block(block: &ScoredBlock) -> (f64, Vec<Vec<f64>>) {
    let b = block.q.len();
    let mut probs = Vec::with_capacity(b);
    let mut loss = 0.0;
    for qi in 0..b {
        let row: Vec<f64> = block.scores.row(qi).to_vec();
        loss += logsumexp(&row) - row[qi];
        probs.push(softmax(&row));
    }
    (loss / b as f64, probs)
}

pub(crate) fn validate_batch(queries_len: usize, items: &[&Item]) -> Result<()> {
    if queries_len < 2 {
        return Err(Error::Invalid(format!(
            "in-batch cross-entropy needs a batch of >= 2, got {queries_len}"
        )));
    }
    if queries_len != items.len() {
        return Err(Error::Invalid("batch queries and gold items differ in length".into()));
    }
    for (i, a) in items.iter().enumerate() {
        for b in &items[i + 1..] {
            if a.id == b.id {
                return Err(Error::Invalid(format!(
                    "gold item `{}` appears twice in one batch",
                    a.id
                )));
            }
        }
    }
    Ok(())
}

/// In-batch-negative cross-entropy: candidates for each query are the gold
/// items of the whole batch (aligned by position), `P` the softmax over
/// MaxSim scores, and the loss the mean of `-ln P(gold)`.
pub fn batch_ce_forward(
    params: &ModelParams,
    queries: &[&Circumlocution],
    items: &[&Item],
) -> Result<BatchCe> {
    let seqs: Vec<EmbeddingSequence> =
        queries.iter().map(|q| embed_query(params, &q.tokens)).collect();
    batch_ce_forward_seqs(params, seqs, items)
}

/// Same as [`batch_ce_forward`] but over caller-built embedding sequences
/// (e.g. perturbed rows for gradient checks).
pub fn batch_ce_forward_seqs(
    params: &ModelParams,
    seqs: Vec<EmbeddingSequence>,
    items: &[&Item],
) -> Result<BatchCe> {
    validate_batch(seqs.len(), items)?;
    let items_enc: Vec<ItemEnc> = items.iter().map(|it| encode_item_full(params, it)).collect();
    let block = forward_block(params, &seqs, &items_enc)?;
    let (loss, probs) = ce_from_block(&block);
    Ok(BatchCe {
        loss,
        probs,
        seqs,
        items_enc,
        block,
    })
}

/// Exact gradients of the in-batch cross-entropy for all parameters and
/// for every query's input embedding rows.
pub fn batch_ce_backward(params: &ModelParams, ce: &BatchCe, items: &[&Item]) -> Gradients {
    let b = ce.seqs.len();
    let mut ds = Array2::<f64>::zeros((b, b));
    for qi in 0..b {
        for ii in 0..b {
            let delta = if ii == qi { 1.0 } else { 0.0 };
            ds[(qi, ii)] = (ce.probs[qi][ii] - delta) / b as f64;
        }
    }
    let mut grads = Gradients::zeros(params);
    let mut item_dv = zero_item_dv(&ce.items_enc, params.config.embed_dim);
    let mut input = Vec::with_capacity(b);
    backward_block(
        params,
        &ce.seqs,
        &ce.block,
        &ce.items_enc,
        &ds,
        &mut grads,
        &mut item_dv,
        Some(&mut input),
    );
    backward_items(params, items, &ce.items_enc, &item_dv, &mut grads);
    grads.query_input = input;
    grads
}
