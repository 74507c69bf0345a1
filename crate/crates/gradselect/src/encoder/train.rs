//! Adam training loop with in-batch negatives.
//!
//! Batches are assembled from a seeded shuffle with the constraint that
//! gold items are distinct within a batch (colliding pairs are deferred to
//! the next batch). Any trailing group that cannot reach two pairs is
//! dropped for that epoch, since in-batch cross-entropy needs at least one
//! negative.

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;

use crate::corpus::{Circumlocution, Item, ItemStore, QuerySet, TrainingSet};
use crate::error::{Error, Result};
use crate::gradaug::{composite_step, AugmentConfig};
use crate::util::derive_rng;

use super::{batch_ce_backward, batch_ce_forward, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedPair {
    pub query_idx: usize,
    pub item_idx: usize,
}

fn resolve_pairs(
    tset: &TrainingSet,
    queries: &QuerySet,
    items: &ItemStore,
) -> Result<Vec<ResolvedPair>> {
    tset.pairs()
        .iter()
        .map(|p| {
            let query_idx = queries
                .iter()
                .position(|q| q.id == p.query_id)
                .ok_or_else(|| Error::UnknownId {
                    id: p.query_id.clone(),
                    context: "training pair query".into(),
                })?;
            let item_idx = items.index_of(&p.item_id).ok_or_else(|| Error::UnknownId {
                id: p.item_id.clone(),
                context: "training pair item".into(),
            })?;
            Ok(ResolvedPair {
                query_idx,
                item_idx,
            })
        })
        .collect()
}

/// Greedy batching with distinct gold items per batch; colliding pairs are
/// deferred in order. Deterministic for a given input order.
pub fn assemble_batches(order: &[ResolvedPair], batch_size: usize) -> Vec<Vec<ResolvedPair>> {
    let mut pending: VecDeque<ResolvedPair> = order.iter().copied().collect();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut used = HashSet::new();
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(p) = pending.pop_front() else { break };
            if used.insert(p.item_idx) {
                batch.push(p);
            } else {
                deferred.push(p);
            }
        }
        for p in deferred.into_iter().rev() {
            pending.push_front(p);
        }
        if batch.len() >= 2 {
            batches.push(batch);
        } else {
            // remaining pairs all share one gold item; no valid batch exists
            break;
        }
    }
    batches
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            b1,
            b2,
            eps,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Train for a fixed number of epochs with Adam. When an augmenter config
/// is supplied, each step optimizes the composite consistency loss;
/// otherwise plain in-batch cross-entropy. Pure function of
/// (start, data, config): the shuffle and every augmentation draw come from
/// streams derived from the config seed.
pub fn train(
    start: &ModelParams,
    tset: &TrainingSet,
    queries: &QuerySet,
    items: &ItemStore,
    augment: Option<&AugmentConfig>,
) -> Result<ModelParams> {
    if tset.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if let Some(cfg) = augment {
        cfg.validate()?;
    }
    let cfg = &start.config;
    cfg.validate()?;
    let pairs = resolve_pairs(tset, queries, items)?;

    let mut model = start.clone();
    let mut flat = model.params.to_flat();
    let mut adam = Adam::new(
        flat.len(),
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let mut rng = derive_rng(cfg.seed, "train-shuffle", 0);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        for batch in assemble_batches(&order, cfg.batch_size) {
            step += 1;
            let batch_queries: Vec<&Circumlocution> =
                batch.iter().map(|p| queries.get(p.query_idx)).collect();
            let batch_items: Vec<&Item> = batch.iter().map(|p| items.get(p.item_idx)).collect();
            let (loss, grads) = match augment {
                Some(aug) => {
                    composite_step(&model, &batch_queries, &batch_items, aug, cfg.seed, step)?
                }
                None => {
                    let ce = batch_ce_forward(&model, &batch_queries, &batch_items)?;
                    let grads = batch_ce_backward(&model, &ce, &batch_items);
                    (ce.loss, grads)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {step}"
                )));
            }
            let gflat = grads.params.to_flat();
            adam.step(&mut flat, &gflat);
            model.params.assign_from_flat(&flat);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Item, Vocab};
    use crate::encoder::{init_params, EncodedCorpus, ModelConfig};

    fn toy() -> (ModelParams, TrainingSet, QuerySet, ItemStore) {
        // 8 queries / 8 items, each query shares exactly its item's tokens:
        // linearly separable at this scale.
        let words = [
            "apple", "banana", "cherry", "date", "elder", "fig", "grape", "haw",
        ];
        let texts: Vec<String> = words
            .iter()
            .map(|w| format!("{w} fruit sweet round"))
            .collect();
        let vocab = Vocab::build(texts.iter().map(String::as_str), 1).unwrap();
        let items: Vec<Item> = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                Item::new(format!("m{i}"), vocab.encode(&format!("{w} fruit sweet round")), 32)
                    .unwrap()
            })
            .collect();
        let store = ItemStore::from_items(items, 32).unwrap();
        let queries: Vec<Circumlocution> = words
            .iter()
            .enumerate()
            .map(|(i, w)| Circumlocution {
                id: format!("q{i}"),
                tokens: vocab.encode(&format!("{w} sweet")),
                sentences: None,
                gold_item_id: Some(format!("m{i}")),
                excluded_sentences: vec![],
            })
            .collect();
        let qs = QuerySet::from_queries(queries).unwrap();
        let tset = TrainingSet::from_gold(&qs, &store).unwrap();
        let config = ModelConfig {
            embed_dim: 16,
            hidden_dim: 12,
            batch_size: 4,
            epochs: 200,
            seed: 5,
            ..ModelConfig::default()
        };
        let model = init_params(&config, &vocab).unwrap();
        (model, tset, qs, store)
    }

    fn mean_loss(model: &ModelParams, qs: &QuerySet, store: &ItemStore) -> f64 {
        let queries: Vec<&Circumlocution> = qs.iter().collect();
        let items: Vec<&Item> = queries
            .iter()
            .map(|q| store.by_id(q.gold_item_id.as_deref().unwrap()).unwrap())
            .collect();
        batch_ce_forward(model, &queries, &items).unwrap().loss
    }

    #[test]
    fn training_descends_on_separable_toy_set() {
        let (model, tset, qs, store) = toy();
        let before = mean_loss(&model, &qs, &store);
        let trained = train(&model, &tset, &qs, &store, None).unwrap();
        let after = mean_loss(&trained, &qs, &store);
        assert!(after < before, "loss {after} did not descend from {before}");
        // and the trained model actually retrieves
        let corpus = EncodedCorpus::build(&trained, &store);
        let mut hits = 0;
        for q in qs.iter() {
            let r = crate::encoder::retrieve(&trained, q, &store, &corpus, 5).unwrap();
            if r.gold_rank == Some(1) {
                hits += 1;
            }
        }
        assert!(hits >= 6, "only {hits}/8 golds at rank 1");
    }

    #[test]
    fn same_seed_same_params() {
        let (model, tset, qs, store) = toy();
        let a = train(&model, &tset, &qs, &store, None).unwrap();
        let b = train(&model, &tset, &qs, &store, None).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
    }

    #[test]
    fn zero_epochs_leaves_params_unchanged() {
        let (mut model, tset, qs, store) = toy();
        model.config.epochs = 0;
        let trained = train(&model, &tset, &qs, &store, None).unwrap();
        assert_eq!(trained.params.to_flat(), model.params.to_flat());
    }

    #[test]
    fn empty_training_set_rejected() {
        let (model, _, qs, store) = toy();
        let empty = TrainingSet::default();
        assert!(train(&model, &empty, &qs, &store, None).is_err());
    }

    #[test]
    fn batches_have_distinct_items() {
        let pairs: Vec<ResolvedPair> = [0, 1, 0, 2, 0, 3]
            .iter()
            .enumerate()
            .map(|(qi, &ii)| ResolvedPair {
                query_idx: qi,
                item_idx: ii,
            })
            .collect();
        let batches = assemble_batches(&pairs, 3);
        for b in &batches {
            let mut seen = HashSet::new();
            for p in b {
                assert!(seen.insert(p.item_idx));
            }
        }
        // two batches fit; the third `0` pair is an unbatchable singleton
        let total: usize = batches.iter().map(Vec::len).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn unbatchable_leftovers_are_dropped() {
        let pairs: Vec<ResolvedPair> = (0..3)
            .map(|qi| ResolvedPair {
                query_idx: qi,
                item_idx: 9,
            })
            .collect();
        let batches = assemble_batches(&pairs, 4);
        assert!(batches.is_empty());
    }
}
