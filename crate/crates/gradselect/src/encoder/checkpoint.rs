//! Versioned checkpoint files: all tensors, the frozen initial snapshot,
//! the model config and the vocabulary, as JSON. f64 values are written in
//! shortest-round-trip form, so save/load is bitwise at 64-bit precision.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};

use super::{ModelConfig, ModelParams, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
    initial: ParamSet,
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        params: model.params.clone(),
        initial: model.initial.clone(),
    };
    let out = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(BufWriter::new(out), &file)
        .map_err(|e| Error::Invalid(format!("cannot serialize checkpoint: {e}")))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: CheckpointFile = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        Error::Malformed {
            path: path.into(),
            line: 0,
            message: format!("invalid checkpoint: {e}"),
        }
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if ckpt.params.to_flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "checkpoint {} contains non-finite parameters",
            path.display()
        )));
    }
    Ok(ModelParams {
        config: ckpt.config,
        vocab: ckpt.vocab,
        params: ckpt.params,
        initial: ckpt.initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::encoder::{init_params, ModelConfig};

    #[test]
    fn round_trip_is_bitwise() {
        let vocab = Vocab::build(["one two three four"], 1).unwrap();
        let config = ModelConfig {
            embed_dim: 5,
            hidden_dim: 4,
            seed: 99,
            ..ModelConfig::default()
        };
        let mut model = init_params(&config, &vocab).unwrap();
        // make params differ from the snapshot
        model.params.query_tower.pool_tau = 0.123456789012345e-3;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let a = model.params.to_flat();
        let b = back.params.to_flat();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let ia = model.initial.to_flat();
        let ib = back.initial.to_flat();
        for (x, y) in ia.iter().zip(&ib) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back.vocab.len(), model.vocab.len());
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let vocab = Vocab::build(["a"], 1).unwrap();
        let model = init_params(&ModelConfig::default(), &vocab).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
