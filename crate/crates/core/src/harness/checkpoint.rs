use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Kbgn, ModelConfig};
use crate::numerics::{AdamState, ParameterRegistry, Tensor};

/// Parameters, optimizer moments and loop position after a finished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub model: ModelConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub global_step: usize,
    pub best_val_mrr: Option<f64>,
    pub params: IndexMap<String, Tensor>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(
        config: &ModelConfig,
        params: &ParameterRegistry,
        adam: &AdamState,
        epoch: usize,
        global_step: usize,
        best_val_mrr: Option<f64>,
    ) -> Self {
        Self {
            config_hash: config.hash(),
            model: config.clone(),
            epoch,
            global_step,
            best_val_mrr,
            params: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: adam.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let ck: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::data(format!("{}:{}", path.display(), e.path()), e.into_inner().to_string()))?;
        if ck.config_hash != ck.model.hash() {
            return Err(Error::data(
                path.display().to_string(),
                "stored config hash does not match the stored config",
            ));
        }
        Ok(ck)
    }

    /// Rebuilds the model after checking that `expected` is the config the
    /// checkpoint was trained with.
    pub fn restore(&self, expected: &ModelConfig) -> Result<(Kbgn, ParameterRegistry)> {
        let hash = expected.hash();
        if hash != self.config_hash {
            let mut diff = Vec::new();
            if expected.ablation != self.model.ablation {
                diff.push(format!("ablation {} vs {}", self.model.ablation, expected.ablation));
            }
            return Err(Error::config(format!(
                "config hash mismatch: checkpoint {} vs requested {}{}",
                &self.config_hash[..12],
                &hash[..12],
                if diff.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", diff.join(", "))
                }
            )));
        }
        self.restore_stored()
    }

    /// Rebuilds the model from the stored config.
    pub fn restore_stored(&self) -> Result<(Kbgn, ParameterRegistry)> {
        let (model, mut params) = Kbgn::new(self.model.clone())?;
        if params.len() != self.params.len() {
            return Err(Error::data(
                "params",
                format!("checkpoint has {} tensors, model needs {}", self.params.len(), params.len()),
            ));
        }
        for (name, slot) in params.iter_mut() {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::data(format!("params.{name}"), "missing"))?;
            if stored.shape() != slot.shape() {
                return Err(Error::data(
                    format!("params.{name}"),
                    format!("shape {:?}, expected {:?}", stored.shape(), slot.shape()),
                ));
            }
            slot.values_mut().copy_from_slice(stored.values());
        }
        Ok((model, params))
    }
}
