//! JSON checkpoints: model config, age scaler and every named parameter.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::model::{AgeScaler, VVit, VVitConfig};
use crate::nn::Module;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "vvit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Model config as `key -> value` text, same keys as the config file.
    pub config: BTreeMap<String, String>,
    pub age_mean: f64,
    pub age_std: f64,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &VVit<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model
                .config
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            age_mean: model.age_scaler.mean,
            age_std: model.age_scaler.std,
            params: model
                .params()
                .into_iter()
                .map(|(name, p)| ParamRecord {
                    name,
                    shape: p.shape().to_vec(),
                    values: p.data().iter().map(|v| v.to_f64().unwrap()).collect(),
                })
                .collect(),
        }
    }

    pub fn model_config(&self) -> Result<VVitConfig> {
        let mut cfg = VVitConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rebuilds the model, checking that every parameter is present with
    /// the shape the config implies.
    pub fn to_model<T: Scalar>(&self) -> Result<VVit<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.version
            )));
        }
        let cfg = self.model_config()?;
        let mut model = VVit::<T>::new(&cfg, &mut Rng::new(0))?;
        model.age_scaler = AgeScaler {
            mean: self.age_mean,
            std: self.age_std,
        };
        let mut stored: BTreeMap<&str, &ParamRecord> =
            self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for (name, slot) in model.params_mut() {
            let rec = stored
                .remove(name.as_str())
                .ok_or_else(|| Error::Input(format!("checkpoint lacks parameter `{name}`")))?;
            if rec.shape != slot.shape() {
                return Err(Error::Input(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, model expects {:?}",
                    rec.shape,
                    slot.shape()
                )));
            }
            let values = rec.values.iter().map(|&v| T::lit(v)).collect();
            *slot = Tensor::param(&rec.shape, values)
                .map_err(|e| Error::Input(format!("parameter `{name}`: {e}")))?;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Input(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("checkpoint: {e}"),
        })
    }
}

pub fn save<T: Scalar>(model: &VVit<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, Checkpoint::from_model(model).to_json()).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<VVit<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)?.to_model()
}
