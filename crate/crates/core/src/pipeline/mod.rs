//! Run configuration, training, evaluation protocols, querying and checkpoints.

mod checkpoint;
mod eval;
mod predict;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::scenedata::ContextMode;
use crate::tensor::AdamConfig;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, evaluate_views, frame_metrics, CurveRow, EvalReport, Protocol, CURVES_HEADER};
pub use predict::{query_view, Predictor, DECODE_CHUNK};
pub use train::{train, StepLosses, TrainOutcome, Trainer, LOSS_HEADER};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory written by `generate`.
    pub dir: PathBuf,
    pub mode: ContextMode,
    pub stride: usize,
    /// Train on these scenes instead of the train split.
    pub scenes: Vec<String>,
    /// Encode and supervise exactly these frames instead of sampling contexts.
    pub views: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Supervised pixels drawn per view and step; 0 uses every valid pixel.
    pub queries_per_view: usize,
    /// Evaluate every this many steps; 0 only after the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, queries_per_view: 256, eval_every: 500 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Evenly spaced target frames per scene.
    pub targets_per_scene: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { protocol: Protocol::Video, targets_per_scene: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig { dir: PathBuf::from("data"), stride: 3, ..Default::default() },
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical text form; every field is written, so equal configs give equal text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// First 8 bytes (little-endian) of the SHA-256 of [`RunConfig::to_toml`].
    pub fn digest(&self) -> u64 {
        text_digest(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        if self.eval.targets_per_scene == 0 {
            return Err(Error::Config("eval.targets_per_scene must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn text_digest(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
