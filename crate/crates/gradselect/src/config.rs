//! Structured run configuration: a single TOML file with sections [data],
//! [model], [train], [augment], [itemaug] and [synth]. The augmentation
//! keys m, n, alpha and beta accept either a scalar or a list; lists
//! expand into a hyperparameter grid with one subdirectory per cell.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::gradaug::{AugmentConfig, ImportanceSignal, NoiseKind, Selector};
use crate::itemaug::{EnsembleRule, ItemAugConfig};
use crate::synthbench::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrList {
    Scalar(f64),
    List(Vec<f64>),
}

impl ScalarOrList {
    pub fn values(&self) -> Vec<f64> {
        match self {
            ScalarOrList::Scalar(v) => vec![*v],
            ScalarOrList::List(vs) => vs.clone(),
        }
    }

    fn scalar(&self) -> f64 {
        match self {
            ScalarOrList::Scalar(v) => *v,
            ScalarOrList::List(_) => panic!("grid not expanded"),
        }
    }

    fn is_list(&self) -> bool {
        matches!(self, ScalarOrList::List(_))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub items: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub eval_queries: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub min_count: usize,
    /// Retrieval depth for run files.
    pub topn: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            items: None,
            queries: None,
            eval_queries: None,
            labels: None,
            min_count: 1,
            topn: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub segment_len: usize,
    pub share_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            segment_len: d.segment_len,
            share_embedding: d.share_embedding,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        TrainSection {
            seed: d.seed,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub enabled: bool,
    pub selector: Selector,
    pub noise: NoiseKind,
    pub m: ScalarOrList,
    pub n: ScalarOrList,
    pub p_aug: f64,
    pub sigma: f64,
    pub alpha: ScalarOrList,
    pub beta: ScalarOrList,
    pub importance: ImportanceSignal,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        AugmentSection {
            enabled: true,
            selector: d.selector,
            noise: d.noise_kind,
            m: ScalarOrList::Scalar(d.m),
            n: ScalarOrList::Scalar(d.n),
            p_aug: d.p_aug,
            sigma: d.sigma,
            alpha: ScalarOrList::Scalar(d.alpha),
            beta: ScalarOrList::Scalar(d.beta),
            importance: d.importance_signal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItemAugSection {
    pub enabled: bool,
    pub k: usize,
    pub ensemble: EnsembleRule,
}

impl Default for ItemAugSection {
    fn default() -> Self {
        let d = ItemAugConfig::default();
        ItemAugSection {
            enabled: true,
            k: d.k,
            ensemble: d.ensemble,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub itemaug: ItemAugSection,
    /// When present, the pipeline generates its own benchmark data.
    pub synth: Option<SynthConfig>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            segment_len: self.model.segment_len,
            share_embedding: self.model.share_embedding,
            seed: self.train.seed,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            ..ModelConfig::default()
        }
    }

    /// The augmenter for training, or None when augmentation is disabled.
    /// Requires an expanded (scalar) config.
    pub fn augment_config(&self) -> Option<AugmentConfig> {
        if !self.augment.enabled {
            return None;
        }
        Some(AugmentConfig {
            m: self.augment.m.scalar(),
            n: self.augment.n.scalar(),
            noise_kind: self.augment.noise,
            p_aug: self.augment.p_aug,
            sigma: self.augment.sigma,
            alpha: self.augment.alpha.scalar(),
            beta: self.augment.beta.scalar(),
            selector: self.augment.selector,
            importance_signal: self.augment.importance,
        })
    }

    pub fn itemaug_config(&self) -> Option<ItemAugConfig> {
        if !self.itemaug.enabled {
            return None;
        }
        Some(ItemAugConfig {
            k: self.itemaug.k,
            ensemble: self.itemaug.ensemble,
        })
    }

    pub fn is_grid(&self) -> bool {
        self.augment.m.is_list()
            || self.augment.n.is_list()
            || self.augment.alpha.is_list()
            || self.augment.beta.is_list()
    }

    /// Expand list-valued augmentation keys into a grid. A scalar config
    /// expands to a single unlabeled cell.
    pub fn grid(&self) -> Vec<GridCell> {
        if !self.is_grid() {
            return vec![GridCell {
                label: None,
                config: self.clone(),
            }];
        }
        let mut cells = Vec::new();
        for &m in &self.augment.m.values() {
            for &n in &self.augment.n.values() {
                for &alpha in &self.augment.alpha.values() {
                    for &beta in &self.augment.beta.values() {
                        let mut cfg = self.clone();
                        cfg.augment.m = ScalarOrList::Scalar(m);
                        cfg.augment.n = ScalarOrList::Scalar(n);
                        cfg.augment.alpha = ScalarOrList::Scalar(alpha);
                        cfg.augment.beta = ScalarOrList::Scalar(beta);
                        cells.push(GridCell {
                            label: Some(format!("m{m}_n{n}_a{alpha}_b{beta}")),
                            config: cfg,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    /// None for a single-cell (scalar) configuration.
    pub label: Option<String>,
    pub config: PipelineConfig,
}
