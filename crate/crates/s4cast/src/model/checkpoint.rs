//! Model checkpoints: JSON documents holding config, seed, and the named
//! flat parameter arrays. Round-trips are bit-exact because values are
//! serialized with shortest-round-trip decimal formatting.

use super::{Model, ModelConfig, ModelError, ParamSet};
use crate::util::write_atomic;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config.clone(),
            seed: model.seed,
            params: model.params.clone().into_map(),
        }
    }

    pub fn into_model(self) -> Result<Model, ModelError> {
        Model::from_parts(self.config, self.seed, ParamSet::from_map(self.params))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let doc = Checkpoint::from_model(model);
    let mut bytes = serde_json::to_vec(&doc)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let bytes = std::fs::read(path)?;
    let doc: Checkpoint = serde_json::from_slice(&bytes)?;
    doc.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            latent_dim: 3,
            state_size: 4,
            feature_dim: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::init(cfg(), 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.seed, model.seed);
        assert_eq!(loaded.params, model.params);
        for (name, vals) in model.params.iter() {
            let got = loaded.params.get(name);
            for (a, b) in vals.iter().zip(got) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} not bit-exact");
            }
        }
    }

    #[test]
    fn saved_twice_is_byte_identical() {
        let model = Model::init(cfg(), 78).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&model, &p1).unwrap();
        save_checkpoint(&model, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_forwards_identically() {
        let model = Model::init(cfg(), 79).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let input = crate::autodiff::Tensor::matrix(6, 5, (0..30).map(|i| i as f64 * 0.1).collect());
        assert_eq!(
            model.forward_once(&input).unwrap(),
            loaded.forward_once(&input).unwrap()
        );
    }
}
