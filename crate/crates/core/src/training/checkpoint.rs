//! Versioned JSON container for model weights, configs, and training history.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Buffers, HeadKind, Model};
use crate::params::{NamedTensor, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "cfdetect-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Base plus classification head.
    Stage1,
    /// Base plus span-regression head.
    Stage2,
}

impl Stage {
    pub fn head(self) -> HeadKind {
        match self {
            Stage::Stage1 => HeadKind::Classification,
            Stage::Stage2 => HeadKind::Regression,
        }
    }
}

/// Metrics recorded after one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// BCE in stage 1, Smooth L1 in stage 2.
    pub dev_loss: f64,
    /// Binary F1 in stage 1, overlap span F1 in stage 2.
    pub dev_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_char_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
    pub buffers: Buffers,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights are stored; 0 for an untrained model.
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        stage: Stage,
        train_config: TrainConfig,
        history: Vec<EpochRecord>,
        best_epoch: usize,
    ) -> Result<Self> {
        if model.head() != stage.head() {
            return Err(Error::Checkpoint(format!(
                "{stage:?} requires a {:?} head, model has {:?}",
                stage.head(),
                model.head()
            )));
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage,
            model_config: model.config().clone(),
            train_config,
            vocab: model.vocab().tokens().to_vec(),
            params: model.params().entries().to_vec(),
            buffers: model.buffers().clone(),
            history,
            best_epoch,
        })
    }

    /// Rebuilds the model, checking every tensor against the stored config.
    pub fn to_model(&self) -> Result<Model> {
        let vocab = Vocab::from_tokens(self.vocab.clone())?;
        let mut store = ParamStore::new();
        for e in &self.params {
            store.insert(e.clone())?;
        }
        Model::from_parts(self.model_config.clone(), vocab, self.stage.head(), store, self.buffers.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let probe: serde_json::Value = serde_json::from_slice(&bytes)?;
        if probe.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        let version = probe.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Checkpoint(format!("unsupported version {version:?}, expected {CHECKPOINT_VERSION}")));
        }
        let ckpt: Checkpoint = serde_json::from_value(probe)?;
        ckpt.to_model()?;
        Ok(ckpt)
    }

    pub fn base_digest(&self) -> Result<String> {
        Ok(self.to_model()?.base_digest())
    }
}
