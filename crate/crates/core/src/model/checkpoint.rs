use std::path::Path;

use super::params::{ModelConfig, ModelParameters};
use crate::artifact::{Artifact, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Model parameters plus the training position they were saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters<f32>,
    pub step: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(params: ModelParameters<f32>, step: usize, seed: u64) -> Self {
        Checkpoint { params, step, seed }
    }

    pub fn to_artifact(&self) -> Artifact {
        let c = &self.params.config;
        let mut a = Artifact::new(CHECKPOINT_KIND);
        a.set("d_model", c.d_model);
        a.set("n_layers", c.n_layers);
        a.set("n_heads", c.n_heads);
        a.set("ffn_dim", c.ffn_dim);
        a.set("d_max", c.d_max);
        a.set("dropout", c.dropout);
        a.set("step", self.step);
        a.set("seed", self.seed);
        for (name, shape, data) in self.params.named_tensors() {
            a.push_tensor(Tensor::new(name, shape, data.to_vec()));
        }
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Checkpoint> {
        if a.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected checkpoint, found '{}'", a.kind)));
        }
        let config = ModelConfig {
            d_model: a.parse("d_model")?,
            n_layers: a.parse("n_layers")?,
            n_heads: a.parse("n_heads")?,
            ffn_dim: a.parse("ffn_dim")?,
            d_max: a.parse("d_max")?,
            dropout: a.parse("dropout")?,
        };
        config.validate()?;
        let mut params = ModelParameters::<f32>::zeros(&config);
        let infos = params.tensor_infos();
        for (info, dst) in infos.iter().zip(params.tensors_mut()) {
            let t = a.tensor(&info.name)?;
            if t.shape != info.shape {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    info.name, t.shape, info.shape
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        if !params.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint {
            params,
            step: a.parse("step")?,
            seed: a.parse("seed")?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_artifact().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        Self::from_artifact(&Artifact::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_artifact().save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::from_artifact(&Artifact::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_tensor() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            d_max: 4,
            dropout: 0.0,
        };
        let ck = Checkpoint::new(ModelParameters::init(&cfg, 3).unwrap(), 17, 99);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn wrong_kind_rejected() {
        let a = Artifact::new("slearner");
        assert!(Checkpoint::from_artifact(&a).is_err());
    }
}
