use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{RelationVocab, Vocabulary};
use crate::gega::{GegaModel, ModelConfig};
use crate::numerics::ParamGroup;
use crate::scalar::Scalar;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gega-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned parameter dump with everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub relations: RelationVocab,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &GegaModel<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            relations: model.relations.clone(),
            tensors: model
                .params
                .iter()
                .map(|(name, group, t)| NamedTensor {
                    name: name.to_string(),
                    group,
                    shape: t.shape().to_vec(),
                    values: t.values().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model<T: Scalar>(&self) -> Result<GegaModel<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint: unsupported format {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        let mut model = GegaModel::new(self.config.clone(), self.vocab.clone(), self.relations.clone())?;
        if model.params.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint: {} tensors but the configuration defines {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for nt in &self.tensors {
            let id = model
                .params
                .find(&nt.name)
                .ok_or_else(|| Error::Config(format!("checkpoint: unknown tensor `{}`", nt.name)))?;
            let t = model.params.get_mut(id);
            if t.shape() != nt.shape.as_slice() || nt.values.len() != t.len() {
                return Err(Error::Config(format!(
                    "checkpoint: tensor `{}` has shape {:?}, configuration expects {:?}",
                    nt.name,
                    nt.shape,
                    t.shape()
                )));
            }
            t.values_mut()
                .iter_mut()
                .zip(&nt.values)
                .for_each(|(d, &s)| *d = T::lit(s));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("<checkpoint>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("<checkpoint>", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
