//! Circumlocution augmentation: gradient-based token importance, band
//! selection, deletion/replacement noise, and the composite consistency
//! loss, plus the random / large-loss / small-loss baseline selectors.
//!
//! The importance of token `i` is the squared L2 norm of the loss gradient
//! at its input embedding row. Tokens are ranked by importance; noise
//! targets only the band between the protected top `ceil(m*l)` ranks and
//! the low-gradient cutoff `floor(n*l)`. Training combines the original
//! and augmented views with `L = ce(C) + alpha * ce(C_aug) + beta *
//! js(P(C), P(C_aug))`, averaged over the batch.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Circumlocution, Item};
use crate::encoder::internal::{
    backward_block, backward_items, encode_item_full, encode_with_tower, forward_block,
    logsumexp, softmax, tower_backward, validate_batch, zero_item_dv, ItemEnc, ScoredBlock,
};
use crate::encoder::{
    batch_ce_backward, batch_ce_forward, embed_query, EmbeddingSequence, EncodedCorpus, Gradients,
    ModelParams, Tower,
};
use crate::error::{Error, Result};
use crate::util::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Delete,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    GradBand,
    Random,
    LargeLoss,
    SmallLoss,
}

/// What scalar the importance gradient differentiates: the gold item's
/// cross-entropy under the candidate softmax (default), or the gold score
/// alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceSignal {
    CeGold,
    GoldScore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Protected fraction: the top `ceil(m*l)` tokens by importance are
    /// never noised.
    pub m: f64,
    /// Band cutoff: only ranks up to `floor(n*l)` are eligible.
    pub n: f64,
    pub noise_kind: NoiseKind,
    /// Per-token noise probability within the band.
    pub p_aug: f64,
    /// Replacement noise scale (standard deviation).
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub selector: Selector,
    pub importance_signal: ImportanceSignal,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            m: 0.05,
            n: 0.7,
            noise_kind: NoiseKind::Delete,
            p_aug: 0.2,
            sigma: 1e-2,
            alpha: 0.05,
            beta: 0.3,
            selector: Selector::GradBand,
            importance_signal: ImportanceSignal::CeGold,
        }
    }
}

impl AugmentConfig {
    /// Degenerate settings are allowed on purpose: `n <= m` selects an
    /// empty band and `p_aug = 0` or `sigma = 0` realize the identity
    /// augmentation.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("n", self.n), ("p_aug", self.p_aug)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-token importance scores with their descending rank permutation
/// (ties break by ascending token index).
#[derive(Debug, Clone)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    /// Token indices sorted by descending score.
    pub order: Vec<usize>,
}

impl ImportanceVector {
    pub fn from_scores(scores: Vec<f64>) -> ImportanceVector {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.cmp(&b))
        });
        ImportanceVector { scores, order }
    }

    /// 1-based importance rank of a token index.
    pub fn rank_of(&self, token_idx: usize) -> usize {
        self.order.iter().position(|&i| i == token_idx).expect("index in range") + 1
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Gradient of a scalar in the candidate scores w.r.t. the query's input
/// embedding rows. `ds` is the scalar's gradient at the score vector.
fn input_grads_for_ds(
    model: &ModelParams,
    seq: &EmbeddingSequence,
    candidate_vecs: &[&[Array1<f64>]],
    ds: &[f64],
) -> Result<Array2<f64>> {
    let cache = encode_with_tower(&model.params.query_tower, &seq.rows.view(), Some(&seq.mask))?;
    let d = model.config.embed_dim;
    let mut gq = Array1::<f64>::zeros(d);
    for (i, vecs) in candidate_vecs.iter().enumerate() {
        if ds[i] == 0.0 {
            continue;
        }
        let (_, seg) = crate::encoder::score(&cache.out, vecs);
        gq.scaled_add(ds[i], &vecs[seg]);
    }
    let mut grows = Array2::<f64>::zeros((seq.len(), d));
    let mut scratch = Tower {
        pool_tau: 0.0,
        w1: Array2::zeros(model.params.query_tower.w1.raw_dim()),
        b1: Array1::zeros(model.params.query_tower.b1.raw_dim()),
        w2: Array2::zeros(model.params.query_tower.w2.raw_dim()),
        b2: Array1::zeros(model.params.query_tower.b2.raw_dim()),
    };
    tower_backward(
        &model.params.query_tower,
        &seq.rows.view(),
        &cache,
        &gq,
        &mut scratch,
        &mut grows,
    );
    Ok(grows)
}

fn importance_from_vecs(
    model: &ModelParams,
    seq: &EmbeddingSequence,
    candidate_vecs: &[&[Array1<f64>]],
    gold_idx: usize,
    signal: ImportanceSignal,
) -> Result<ImportanceVector> {
    if gold_idx >= candidate_vecs.len() {
        return Err(Error::Invalid(format!(
            "gold index {gold_idx} outside candidate set of {}",
            candidate_vecs.len()
        )));
    }
    let cache = encode_with_tower(&model.params.query_tower, &seq.rows.view(), Some(&seq.mask))?;
    let scores: Vec<f64> = candidate_vecs
        .iter()
        .map(|vecs| crate::encoder::score(&cache.out, vecs).0)
        .collect();
    let ds: Vec<f64> = match signal {
        ImportanceSignal::CeGold => {
            let probs = softmax(&scores);
            probs
                .iter()
                .enumerate()
                .map(|(i, p)| p - if i == gold_idx { 1.0 } else { 0.0 })
                .collect()
        }
        ImportanceSignal::GoldScore => (0..scores.len())
            .map(|i| if i == gold_idx { 1.0 } else { 0.0 })
            .collect(),
    };
    let grows = input_grads_for_ds(model, seq, candidate_vecs, &ds)?;
    let imp: Vec<f64> = (0..seq.len()).map(|i| grows.row(i).dot(&grows.row(i))).collect();
    Ok(ImportanceVector::from_scores(imp))
}

/// Per-token importance against an explicit candidate item list. The gold
/// item must be among the candidates (`gold_idx`).
pub fn importance_scores(
    model: &ModelParams,
    seq: &EmbeddingSequence,
    candidates: &[&Item],
    gold_idx: usize,
    signal: ImportanceSignal,
) -> Result<ImportanceVector> {
    let encoded: Vec<Vec<Array1<f64>>> = candidates
        .iter()
        .map(|it| crate::encoder::encode_item(model, it))
        .collect();
    let views: Vec<&[Array1<f64>]> = encoded.iter().map(|v| v.as_slice()).collect();
    importance_from_vecs(model, seq, &views, gold_idx, signal)
}

/// Per-token importance with the whole encoded corpus as candidate set.
pub fn importance_scores_corpus(
    model: &ModelParams,
    seq: &EmbeddingSequence,
    corpus: &EncodedCorpus,
    gold_idx: usize,
    signal: ImportanceSignal,
) -> Result<ImportanceVector> {
    let views: Vec<&[Array1<f64>]> = corpus.vecs.iter().map(|v| v.as_slice()).collect();
    importance_from_vecs(model, seq, &views, gold_idx, signal)
}

/// Eligible token indices for noising: importance ranks in
/// `(ceil(m*l), floor(n*l)]`, returned in ascending token-index order.
/// Empty whenever `floor(n*l) <= ceil(m*l)`.
pub fn select_band(imp: &ImportanceVector, m: f64, n: f64) -> Vec<usize> {
    let l = imp.len();
    let protect = ((m * l as f64) - 1e-9).ceil().max(0.0) as usize;
    let cutoff = (((n * l as f64) + 1e-9).floor().max(0.0) as usize).min(l);
    if cutoff <= protect {
        return Vec::new();
    }
    let mut eligible: Vec<usize> = imp.order[protect..cutoff].to_vec();
    eligible.sort_unstable();
    eligible
}

/// Eligible indices for a selector: the gradient band for `GradBand`, all
/// indices otherwise (the loss-gated selectors noise like `Random` and gate
/// afterwards).
pub fn selector_eligible(
    selector: Selector,
    imp: Option<&ImportanceVector>,
    m: f64,
    n: f64,
    l: usize,
) -> Vec<usize> {
    match selector {
        Selector::GradBand => select_band(imp.expect("GradBand requires importance"), m, n),
        Selector::Random | Selector::LargeLoss | Selector::SmallLoss => (0..l).collect(),
    }
}

/// The realized augmentation of one query: which indices were eligible,
/// which were actually noised, and the noise itself.
#[derive(Debug, Clone)]
pub struct AugmentMask {
    pub eligible: Vec<usize>,
    pub realized: Vec<usize>,
    pub noise_kind: NoiseKind,
}

#[derive(Debug, Clone)]
pub enum NoiseRealization {
    Identity,
    Delete(Vec<usize>),
    /// Additive rows, zero outside the realized indices.
    Replace(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct QueryRealization {
    pub mask: AugmentMask,
    pub noise: NoiseRealization,
    /// Selector acceptance: when false, the alpha/beta terms of this query
    /// are dropped from the composite loss.
    pub accepted: bool,
}

/// Sample a realization: each eligible index is independently noised with
/// probability `p_aug`. A deletion draw that would mask every remaining
/// row drops one realized deletion at random.
pub fn sample_realization(
    seq: &EmbeddingSequence,
    eligible: &[usize],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<QueryRealization> {
    let l = seq.len();
    if let Some(&bad) = eligible.iter().find(|&&i| i >= l) {
        return Err(Error::Invalid(format!(
            "eligible index {bad} out of bounds for query of length {l}"
        )));
    }
    let mut realized: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < cfg.p_aug)
        .collect();
    let noise = match cfg.noise_kind {
        NoiseKind::Delete => {
            let active: Vec<usize> = (0..l).filter(|&i| !seq.mask[i]).collect();
            let would_mask = active.iter().filter(|i| realized.contains(i)).count();
            if would_mask == active.len() && !realized.is_empty() {
                let drop = rng.random_range(0..realized.len());
                realized.remove(drop);
            }
            if realized.is_empty() {
                NoiseRealization::Identity
            } else {
                NoiseRealization::Delete(realized.clone())
            }
        }
        NoiseKind::Replace => {
            if realized.is_empty() {
                NoiseRealization::Identity
            } else {
                let normal = Normal::new(0.0, cfg.sigma)
                    .map_err(|e| Error::Config(format!("bad sigma: {e}")))?;
                let d = seq.rows.ncols();
                let mut add = Array2::<f64>::zeros((l, d));
                for &i in &realized {
                    for dim in 0..d {
                        add[(i, dim)] = normal.sample(rng);
                    }
                }
                NoiseRealization::Replace(add)
            }
        }
    };
    Ok(QueryRealization {
        mask: AugmentMask {
            eligible: eligible.to_vec(),
            realized,
            noise_kind: cfg.noise_kind,
        },
        noise,
        accepted: true,
    })
}

/// Apply a frozen realization to an embedding sequence.
pub fn apply_realization(seq: &EmbeddingSequence, real: &QueryRealization) -> EmbeddingSequence {
    let mut out = seq.clone();
    match &real.noise {
        NoiseRealization::Identity => {}
        NoiseRealization::Delete(indices) => {
            for &i in indices {
                out.mask[i] = true;
            }
        }
        NoiseRealization::Replace(add) => {
            out.rows += add;
        }
    }
    out
}

/// Noise the eligible rows of an embedding sequence: deletion sets the row
/// mask, replacement adds Gaussian rows. Non-eligible rows are untouched
/// and at least one row always stays active.
pub fn apply_noise(
    seq: &EmbeddingSequence,
    eligible: &[usize],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EmbeddingSequence, AugmentMask)> {
    let real = sample_realization(seq, eligible, cfg, rng)?;
    Ok((apply_realization(seq, &real), real.mask))
}

/// Jensen-Shannon divergence `0.5*KL(P||M) + 0.5*KL(Q||M)` with
/// `M = (P+Q)/2`, natural log, and `0 * ln(0/x) := 0`. Symmetric, bounded
/// by `ln 2`, zero iff `P = Q`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Invalid(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for dist in [p, q] {
        if dist.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Invalid("distribution entries must be finite and >= 0".into()));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("distribution sums to {sum}, not 1")));
        }
    }
    let mut js = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        if p[i] > 0.0 {
            js += 0.5 * p[i] * (p[i] / m).ln();
        }
        if q[i] > 0.0 {
            js += 0.5 * q[i] * (q[i] / m).ln();
        }
    }
    Ok(js)
}

/// The frozen augmentations of one batch.
#[derive(Debug, Clone)]
pub struct BatchRealization {
    pub per_query: Vec<QueryRealization>,
}

/// Per-query cross-entropy of the gold (aligned at `gold_idx`) under the
/// batch candidate scores.
fn query_ce(scores: &[f64], gold_idx: usize) -> f64 {
    logsumexp(scores) - scores[gold_idx]
}

/// Realize the augmentation of every query in a batch. For `GradBand` the
/// band derives from fresh importance scores against the batch candidates;
/// the loss-gated selectors noise everywhere and accept by comparing the
/// original and augmented cross-entropies.
pub fn realize_batch(
    model: &ModelParams,
    batch_queries: &[&Circumlocution],
    batch_items: &[&Item],
    cfg: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<BatchRealization> {
    cfg.validate()?;
    validate_batch(batch_queries.len(), batch_items)?;
    let encoded: Vec<Vec<Array1<f64>>> = batch_items
        .iter()
        .map(|it| crate::encoder::encode_item(model, it))
        .collect();
    let views: Vec<&[Array1<f64>]> = encoded.iter().map(|v| v.as_slice()).collect();

    let mut per_query = Vec::with_capacity(batch_queries.len());
    for (qi, q) in batch_queries.iter().enumerate() {
        let seq = embed_query(model, &q.tokens);
        let eligible = match cfg.selector {
            Selector::GradBand => {
                let imp = importance_from_vecs(model, &seq, &views, qi, cfg.importance_signal)?;
                select_band(&imp, cfg.m, cfg.n)
            }
            _ => (0..seq.len()).collect(),
        };
        let mut rng = derive_rng(seed, &format!("aug:{}", q.id), step);
        let mut real = sample_realization(&seq, &eligible, cfg, &mut rng)?;
        if matches!(cfg.selector, Selector::LargeLoss | Selector::SmallLoss) {
            let q_orig = encode_with_tower(
                &model.params.query_tower,
                &seq.rows.view(),
                Some(&seq.mask),
            )?;
            let aug = apply_realization(&seq, &real);
            let q_aug =
                encode_with_tower(&model.params.query_tower, &aug.rows.view(), Some(&aug.mask))?;
            let s_orig: Vec<f64> =
                views.iter().map(|v| crate::encoder::score(&q_orig.out, v).0).collect();
            let s_aug: Vec<f64> =
                views.iter().map(|v| crate::encoder::score(&q_aug.out, v).0).collect();
            let ce_orig = query_ce(&s_orig, qi);
            let ce_aug = query_ce(&s_aug, qi);
            real.accepted = match cfg.selector {
                Selector::LargeLoss => ce_aug > ce_orig,
                Selector::SmallLoss => ce_aug < ce_orig,
                _ => unreachable!(),
            };
        }
        per_query.push(real);
    }
    Ok(BatchRealization { per_query })
}

struct CompositeForward {
    loss: f64,
    seqs: Vec<EmbeddingSequence>,
    seqs_aug: Vec<EmbeddingSequence>,
    block: ScoredBlock,
    block_aug: ScoredBlock,
    items_enc: Vec<ItemEnc>,
}

fn composite_forward(
    model: &ModelParams,
    batch_queries: &[&Circumlocution],
    batch_items: &[&Item],
    alpha: f64,
    beta: f64,
    realization: &BatchRealization,
) -> Result<CompositeForward> {
    validate_batch(batch_queries.len(), batch_items)?;
    if realization.per_query.len() != batch_queries.len() {
        return Err(Error::Invalid("realization does not match batch size".into()));
    }
    let b = batch_queries.len();
    let seqs: Vec<EmbeddingSequence> = batch_queries
        .iter()
        .map(|q| embed_query(model, &q.tokens))
        .collect();
    let seqs_aug: Vec<EmbeddingSequence> = seqs
        .iter()
        .zip(&realization.per_query)
        .map(|(s, r)| apply_realization(s, r))
        .collect();
    let items_enc: Vec<ItemEnc> =
        batch_items.iter().map(|it| encode_item_full(model, it)).collect();
    let block = forward_block(model, &seqs, &items_enc)?;
    let block_aug = forward_block(model, &seqs_aug, &items_enc)?;

    let mut loss = 0.0;
    for qi in 0..b {
        let s: Vec<f64> = block.scores.row(qi).to_vec();
        let sa: Vec<f64> = block_aug.scores.row(qi).to_vec();
        let ce = query_ce(&s, qi);
        loss += ce;
        if realization.per_query[qi].accepted {
            let ce_aug = query_ce(&sa, qi);
            let js = js_divergence(&softmax(&s), &softmax(&sa))?;
            loss += alpha * ce_aug + beta * js;
        }
    }
    loss /= b as f64;
    Ok(CompositeForward {
        loss,
        seqs,
        seqs_aug,
        block,
        block_aug,
        items_enc,
    })
}

/// Composite loss value under a frozen realization (forward only; the
/// anchor for finite-difference checks with replayed noise).
pub fn composite_frozen_loss(
    model: &ModelParams,
    batch_queries: &[&Circumlocution],
    batch_items: &[&Item],
    alpha: f64,
    beta: f64,
    realization: &BatchRealization,
) -> Result<f64> {
    Ok(composite_forward(model, batch_queries, batch_items, alpha, beta, realization)?.loss)
}

/// Composite loss and exact gradients under a frozen realization.
/// Gradients flow through all three terms; `query_input` holds the
/// original-view input gradients.
pub fn composite_frozen(
    model: &ModelParams,
    batch_queries: &[&Circumlocution],
    batch_items: &[&Item],
    alpha: f64,
    beta: f64,
    realization: &BatchRealization,
) -> Result<(f64, Gradients)> {
    let fwd = composite_forward(model, batch_queries, batch_items, alpha, beta, realization)?;
    let b = batch_queries.len();
    let bf = b as f64;
    let mut ds_orig = Array2::<f64>::zeros((b, b));
    let mut ds_aug = Array2::<f64>::zeros((b, b));
    for qi in 0..b {
        let s: Vec<f64> = fwd.block.scores.row(qi).to_vec();
        let sa: Vec<f64> = fwd.block_aug.scores.row(qi).to_vec();
        let p = softmax(&s);
        let pa = softmax(&sa);
        // ce(C): d/ds = (P - onehot)/B
        for ii in 0..b {
            let delta = if ii == qi { 1.0 } else { 0.0 };
            ds_orig[(qi, ii)] += (p[ii] - delta) / bf;
        }
        if !realization.per_query[qi].accepted {
            continue;
        }
        // alpha * ce(C_aug)
        for ii in 0..b {
            let delta = if ii == qi { 1.0 } else { 0.0 };
            ds_aug[(qi, ii)] += alpha * (pa[ii] - delta) / bf;
        }
        // beta * js: dJS/dP_j = 0.5 ln(P_j / M_j), then through each
        // softmax. With t_j = P_j * dJS/dP_j the score gradient is
        // t_k - P_k * sum(t).
        if beta != 0.0 {
            let t_p: Vec<f64> = (0..b)
                .map(|j| {
                    let m = 0.5 * (p[j] + pa[j]);
                    if p[j] > 0.0 {
                        p[j] * 0.5 * (p[j] / m).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            let t_q: Vec<f64> = (0..b)
                .map(|j| {
                    let m = 0.5 * (p[j] + pa[j]);
                    if pa[j] > 0.0 {
                        pa[j] * 0.5 * (pa[j] / m).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            let sum_tp: f64 = t_p.iter().sum();
            let sum_tq: f64 = t_q.iter().sum();
            for k in 0..b {
                ds_orig[(qi, k)] += beta * (t_p[k] - p[k] * sum_tp) / bf;
                ds_aug[(qi, k)] += beta * (t_q[k] - pa[k] * sum_tq) / bf;
            }
        }
    }

    let mut grads = Gradients::zeros(model);
    let mut item_dv = zero_item_dv(&fwd.items_enc, model.config.embed_dim);
    let mut input = Vec::with_capacity(b);
    backward_block(
        model,
        &fwd.seqs,
        &fwd.block,
        &fwd.items_enc,
        &ds_orig,
        &mut grads,
        &mut item_dv,
        Some(&mut input),
    );
    backward_block(
        model,
        &fwd.seqs_aug,
        &fwd.block_aug,
        &fwd.items_enc,
        &ds_aug,
        &mut grads,
        &mut item_dv,
        None,
    );
    backward_items(model, batch_items, &fwd.items_enc, &item_dv, &mut grads);
    grads.query_input = input;
    Ok((fwd.loss, grads))
}

/// One training step of the composite loss: realize fresh augmentations
/// (importance recomputed at the current parameters), then differentiate.
/// With `alpha = beta = 0` this is exactly the plain cross-entropy step.
pub fn composite_step(
    model: &ModelParams,
    batch_queries: &[&Circumlocution],
    batch_items: &[&Item],
    cfg: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<(f64, Gradients)> {
    if cfg.alpha == 0.0 && cfg.beta == 0.0 {
        let ce = batch_ce_forward(model, batch_queries, batch_items)?;
        let grads = batch_ce_backward(model, &ce, batch_items);
        return Ok((ce.loss, grads));
    }
    let realization = realize_batch(model, batch_queries, batch_items, cfg, seed, step)?;
    composite_frozen(model, batch_queries, batch_items, cfg.alpha, cfg.beta, &realization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Item, Vocab};
    use crate::encoder::{init_params, ModelConfig};

    fn setup() -> (ModelParams, Vec<Circumlocution>, Vec<Item>) {
        let vocab = Vocab::build(
            ["ruby coral amber jade onyx pearl slate ivory azure flint"],
            1,
        )
        .unwrap();
        let config = ModelConfig {
            embed_dim: 7,
            hidden_dim: 5,
            segment_len: 4,
            seed: 13,
            ..ModelConfig::default()
        };
        let mut model = init_params(&config, &vocab).unwrap();
        model.params.query_tower.pool_tau = 0.4;
        model.params.item_tower.pool_tau = 0.1;
        let queries = vec![
            Circumlocution {
                id: "q1".into(),
                tokens: vocab.encode("ruby coral amber jade onyx"),
                sentences: None,
                gold_item_id: Some("m1".into()),
                excluded_sentences: vec![],
            },
            Circumlocution {
                id: "q2".into(),
                tokens: vocab.encode("pearl slate ivory"),
                sentences: None,
                gold_item_id: Some("m2".into()),
                excluded_sentences: vec![],
            },
        ];
        let items = vec![
            Item::new("m1".into(), vocab.encode("ruby amber onyx azure"), 4).unwrap(),
            Item::new("m2".into(), vocab.encode("pearl ivory flint"), 4).unwrap(),
        ];
        (model, queries, items)
    }

    #[test]
    fn importance_scales_quadratically_and_keeps_order() {
        let (model, queries, items) = setup();
        let seq = embed_query(&model, &queries[0].tokens);
        let encoded: Vec<Vec<Array1<f64>>> =
            items.iter().map(|it| crate::encoder::encode_item(&model, it)).collect();
        let views: Vec<&[Array1<f64>]> = encoded.iter().map(|v| v.as_slice()).collect();
        let probs = {
            let cache = encode_with_tower(
                &model.params.query_tower,
                &seq.rows.view(),
                Some(&seq.mask),
            )
            .unwrap();
            let scores: Vec<f64> =
                views.iter().map(|v| crate::encoder::score(&cache.out, v).0).collect();
            softmax(&scores)
        };
        let ds: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| p - if i == 0 { 1.0 } else { 0.0 })
            .collect();
        let kappa = 3.0;
        let ds_scaled: Vec<f64> = ds.iter().map(|d| kappa * d).collect();
        let g1 = input_grads_for_ds(&model, &seq, &views, &ds).unwrap();
        let g2 = input_grads_for_ds(&model, &seq, &views, &ds_scaled).unwrap();
        let imp1: Vec<f64> = (0..seq.len()).map(|i| g1.row(i).dot(&g1.row(i))).collect();
        let imp2: Vec<f64> = (0..seq.len()).map(|i| g2.row(i).dot(&g2.row(i))).collect();
        for (a, b) in imp1.iter().zip(&imp2) {
            assert!((b - kappa * kappa * a).abs() <= 1e-12 * b.abs().max(1e-30));
        }
        assert_eq!(
            ImportanceVector::from_scores(imp1).order,
            ImportanceVector::from_scores(imp2).order
        );
    }

    #[test]
    fn masked_token_has_zero_importance() {
        let (model, queries, items) = setup();
        let mut seq = embed_query(&model, &queries[0].tokens);
        seq.mask[2] = true;
        let refs: Vec<&Item> = items.iter().collect();
        let imp = importance_scores(&model, &seq, &refs, 0, ImportanceSignal::CeGold).unwrap();
        assert_eq!(imp.scores[2], 0.0);
        assert!(imp.scores.iter().enumerate().any(|(i, &s)| i != 2 && s > 0.0));
        assert!(imp.scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn band_of_twenty_tokens() {
        let scores: Vec<f64> = (0..20).map(|i| (20 - i) as f64).collect();
        let imp = ImportanceVector::from_scores(scores);
        let band = select_band(&imp, 0.05, 0.7);
        // ranks 2..=14: token indices 1..=13
        assert_eq!(band, (1..=13).collect::<Vec<_>>());
        assert_eq!(band.len(), 13);
        assert!(!band.contains(&0), "rank 1 must stay protected");
    }

    #[test]
    fn full_band_when_m0_n1() {
        let imp = ImportanceVector::from_scores(vec![0.3, 0.1, 0.2]);
        assert_eq!(select_band(&imp, 0.0, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn degenerate_band_is_empty() {
        let imp = ImportanceVector::from_scores(vec![0.3, 0.1, 0.2]);
        assert!(select_band(&imp, 0.05, 0.3).is_empty());
    }

    #[test]
    fn delete_noise_masks_exactly_the_eligible_rows_at_p1() {
        let (model, queries, _) = setup();
        let seq = embed_query(&model, &queries[0].tokens);
        let cfg = AugmentConfig {
            p_aug: 1.0,
            noise_kind: NoiseKind::Delete,
            ..AugmentConfig::default()
        };
        let mut rng = derive_rng(1, "t", 0);
        let (aug, mask) = apply_noise(&seq, &[2, 3], &cfg, &mut rng).unwrap();
        assert_eq!(mask.realized, vec![2, 3]);
        assert_eq!(aug.mask, vec![false, false, true, true, false]);
        assert_eq!(aug.active_count(), 3);
    }

    #[test]
    fn delete_never_empties_the_query() {
        let (model, _, _) = setup();
        let seq = embed_query(&model, &[3, 4]);
        let cfg = AugmentConfig {
            p_aug: 1.0,
            noise_kind: NoiseKind::Delete,
            ..AugmentConfig::default()
        };
        for s in 0..20 {
            let mut rng = derive_rng(s, "t", 0);
            let (aug, mask) = apply_noise(&seq, &[0, 1], &cfg, &mut rng).unwrap();
            assert_eq!(aug.active_count(), 1);
            assert_eq!(mask.realized.len(), 1);
        }
    }

    #[test]
    fn replace_touches_only_realized_rows() {
        let (model, queries, _) = setup();
        let seq = embed_query(&model, &queries[0].tokens);
        let cfg = AugmentConfig {
            p_aug: 1.0,
            noise_kind: NoiseKind::Replace,
            sigma: 0.5,
            ..AugmentConfig::default()
        };
        let mut rng = derive_rng(2, "t", 0);
        let (aug, mask) = apply_noise(&seq, &[1, 4], &cfg, &mut rng).unwrap();
        assert_eq!(mask.realized, vec![1, 4]);
        for i in 0..seq.len() {
            let same = aug.rows.row(i) == seq.rows.row(i);
            if mask.realized.contains(&i) {
                assert!(!same, "row {i} should be perturbed");
            } else {
                assert!(same, "row {i} should be bitwise untouched");
            }
        }
    }

    #[test]
    fn replace_with_zero_sigma_is_identity() {
        let (model, queries, _) = setup();
        let seq = embed_query(&model, &queries[0].tokens);
        let cfg = AugmentConfig {
            p_aug: 1.0,
            noise_kind: NoiseKind::Replace,
            sigma: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = derive_rng(3, "t", 0);
        let (aug, _) = apply_noise(&seq, &[0, 1, 2], &cfg, &mut rng).unwrap();
        assert_eq!(aug.rows, seq.rows);
    }

    #[test]
    fn js_spec_values() {
        assert_eq!(js_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let lnl2 = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((lnl2 - std::f64::consts::LN_2).abs() < 1e-15);
        // direct evaluation: P=(.5,.5), Q=(1,0), M=(.75,.25)
        let expect = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (1.0 * (1.0f64 / 0.75).ln());
        let got = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn js_rejects_bad_input() {
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.7, 0.7], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn alpha_beta_zero_reduces_to_plain_ce() {
        let (model, queries, items) = setup();
        let qrefs: Vec<&Circumlocution> = queries.iter().collect();
        let irefs: Vec<&Item> = items.iter().collect();
        let cfg = AugmentConfig {
            alpha: 0.0,
            beta: 0.0,
            ..AugmentConfig::default()
        };
        let (loss, grads) = composite_step(&model, &qrefs, &irefs, &cfg, 7, 1).unwrap();
        let ce = batch_ce_forward(&model, &qrefs, &irefs).unwrap();
        let ce_grads = batch_ce_backward(&model, &ce, &irefs);
        assert_eq!(loss, ce.loss);
        assert_eq!(grads.params.to_flat(), ce_grads.params.to_flat());
    }

    #[test]
    fn empty_band_gives_identity_and_scaled_ce() {
        let (model, queries, items) = setup();
        let qrefs: Vec<&Circumlocution> = queries.iter().collect();
        let irefs: Vec<&Item> = items.iter().collect();
        // m=n: the band is empty for every query length
        let cfg = AugmentConfig {
            m: 0.5,
            n: 0.5,
            alpha: 0.25,
            beta: 0.9,
            ..AugmentConfig::default()
        };
        let realization = realize_batch(&model, &qrefs, &irefs, &cfg, 7, 1).unwrap();
        for r in &realization.per_query {
            assert!(matches!(r.noise, NoiseRealization::Identity));
        }
        let loss =
            composite_frozen_loss(&model, &qrefs, &irefs, cfg.alpha, cfg.beta, &realization)
                .unwrap();
        let ce = batch_ce_forward(&model, &qrefs, &irefs).unwrap();
        assert!((loss - (1.0 + cfg.alpha) * ce.loss).abs() < 1e-12);
    }

    #[test]
    fn loss_gated_selectors_match_reference_decisions() {
        let (model, queries, items) = setup();
        let qrefs: Vec<&Circumlocution> = queries.iter().collect();
        let irefs: Vec<&Item> = items.iter().collect();
        for (selector, want_larger) in
            [(Selector::LargeLoss, true), (Selector::SmallLoss, false)]
        {
            let cfg = AugmentConfig {
                selector,
                p_aug: 0.8,
                ..AugmentConfig::default()
            };
            for step in 1..12 {
                let real = realize_batch(&model, &qrefs, &irefs, &cfg, 11, step).unwrap();
                for (qi, r) in real.per_query.iter().enumerate() {
                    // oracle: recompute both per-query losses independently
                    let seq = embed_query(&model, &queries[qi].tokens);
                    let aug = apply_realization(&seq, r);
                    let ce = |s: &EmbeddingSequence| {
                        let qv = crate::encoder::encode_query(&model, s).unwrap();
                        let scores: Vec<f64> = items
                            .iter()
                            .map(|it| {
                                crate::encoder::encode_item(&model, it)
                                    .iter()
                                    .map(|v| qv.dot(v))
                                    .fold(f64::NEG_INFINITY, f64::max)
                            })
                            .collect();
                        logsumexp(&scores) - scores[qi]
                    };
                    let (o, a) = (ce(&seq), ce(&aug));
                    let expect = if want_larger { a > o } else { a < o };
                    assert_eq!(r.accepted, expect, "selector {selector:?} step {step} q{qi}");
                }
            }
        }
    }

    #[test]
    fn grad_band_protects_top_ranks() {
        let (model, queries, items) = setup();
        let qrefs: Vec<&Circumlocution> = queries.iter().collect();
        let irefs: Vec<&Item> = items.iter().collect();
        let cfg = AugmentConfig {
            m: 0.2,
            n: 1.0,
            p_aug: 1.0,
            ..AugmentConfig::default()
        };
        let encoded: Vec<Vec<Array1<f64>>> =
            items.iter().map(|it| crate::encoder::encode_item(&model, it)).collect();
        let views: Vec<&[Array1<f64>]> = encoded.iter().map(|v| v.as_slice()).collect();
        for step in 1..10 {
            let real = realize_batch(&model, &qrefs, &irefs, &cfg, 3, step).unwrap();
            for (qi, r) in real.per_query.iter().enumerate() {
                let seq = embed_query(&model, &queries[qi].tokens);
                let imp =
                    importance_from_vecs(&model, &seq, &views, qi, cfg.importance_signal).unwrap();
                let protect = ((cfg.m * seq.len() as f64) - 1e-9).ceil() as usize;
                for &idx in &r.mask.realized {
                    assert!(imp.rank_of(idx) > protect);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn js_symmetric_and_bounded(
                raw_p in proptest::collection::vec(1e-6f64..1.0, 4),
                raw_q in proptest::collection::vec(1e-6f64..1.0, 4)
            ) {
                let norm = |v: &[f64]| {
                    let s: f64 = v.iter().sum();
                    v.iter().map(|x| x / s).collect::<Vec<_>>()
                };
                let p = norm(&raw_p);
                let q = norm(&raw_q);
                let ab = js_divergence(&p, &q).unwrap();
                let ba = js_divergence(&q, &p).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!(ab >= 0.0);
                prop_assert!(ab <= std::f64::consts::LN_2 + 1e-12);
                let self_js = js_divergence(&p, &p).unwrap();
                prop_assert!(self_js.abs() < 1e-12);
            }

            #[test]
            fn band_never_contains_protected_ranks(
                scores in proptest::collection::vec(0.0f64..10.0, 1..40),
                m in 0.0f64..1.0,
                n in 0.0f64..1.0
            ) {
                let imp = ImportanceVector::from_scores(scores);
                let band = select_band(&imp, m, n);
                let protect = ((m * imp.len() as f64) - 1e-9).ceil().max(0.0) as usize;
                for idx in band {
                    prop_assert!(imp.rank_of(idx) > protect);
                    prop_assert!(idx < imp.len());
                }
            }
        }
    }
}
