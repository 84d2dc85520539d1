//! The run configuration read by every pipeline command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeTrainConfig, AutoencoderConfig};
use crate::corruption::ContrastPivot;
use crate::error::{io_err, CamsegError, Result};
use crate::model::{DiffusionConfig, ModelTrainConfig};
use crate::synthetic::SceneSpec;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Dataset root; relative paths resolve against the run directory.
    pub root: PathBuf,
    pub scene: SceneSpec,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            scene: SceneSpec::default(),
            train_count: 2000,
            val_count: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    pub model: AutoencoderConfig,
    pub train: AeTrainConfig,
    /// Checkpoint used by `train-model`; defaults to the arm's file in the run directory.
    pub checkpoint: Option<PathBuf>,
    pub frozen: bool,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self {
            model: AutoencoderConfig::default(),
            train: AeTrainConfig::default(),
            checkpoint: None,
            frozen: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Bundled palette name or palette file.
    pub palette: String,
    /// Bundled category set name or category JSON file.
    pub categories: String,
    pub sweep: Option<PathBuf>,
    pub contrast_pivot: ContrastPivot,
    /// Progressive unmasking rounds at inference; 1 is a single full-mask pass.
    pub ar_steps: usize,
    /// Limit evaluation to the first N images of the split.
    pub max_images: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            palette: "toyscapes8".into(),
            categories: "toyscapes8".into(),
            sweep: None,
            contrast_pivot: ContrastPivot::MeanLuma,
            ar_steps: 1,
            max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub autoencoder: AutoencoderSection,
    pub transformer: TransformerConfig,
    pub diffusion: DiffusionConfig,
    pub training: ModelTrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CamsegError::Format {
            source_name: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        if self.dataset.train_count == 0 || self.dataset.val_count == 0 {
            return Err(CamsegError::Config("dataset needs at least one train and one val image".into()));
        }
        self.autoencoder.model.validate()?;
        self.autoencoder.model.grid(self.dataset.scene.height, self.dataset.scene.width)?;
        self.transformer.validate()?;
        self.diffusion.validate()?;
        if self.eval.ar_steps == 0 {
            return Err(CamsegError::Config("ar_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Latent positions per image.
    pub fn seq_len(&self) -> Result<usize> {
        let (h, w) = self.autoencoder.model.grid(self.dataset.scene.height, self.dataset.scene.width)?;
        Ok(h * w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.seq_len().unwrap(), 256);
    }

    #[test]
    fn partial_files_take_defaults_and_typos_fail() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "training": {"steps": 5}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.steps, 5);
        assert_eq!(cfg.training.batch, 16);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainig": {}}"#).is_err());
    }

    #[test]
    fn inference_steps_cannot_exceed_training_steps() {
        let mut cfg = RunConfig::default();
        cfg.diffusion.infer_steps = 2000;
        assert!(cfg.validate().is_err());
    }
}
