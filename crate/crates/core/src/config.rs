//! Run configuration, namespaced by component.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::sap::SapConfig;

/// `train.*`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Triplet margin `m`.
    pub margin: f64,
    /// Weight `λ` of the semantic loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Adds the audio-anchored triplet term.
    pub symmetric_triplet: bool,
    /// Freezes the audio encoder, prompt projection and fusion projection.
    pub freeze_prompt_path: bool,
    /// Number of object classes; sizes the pretraining prompt table.
    pub num_classes: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_scenes: usize,
    pub check_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            margin: 0.5,
            lambda: 0.1,
            batch_size: 8,
            steps: 2000,
            symmetric_triplet: false,
            freeze_prompt_path: false,
            num_classes: 8,
            pretrain_steps: 600,
            pretrain_lr: 2e-3,
            pretrain_scenes: 1200,
            check_finite: false,
        }
    }
}

/// `eval.*`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `β²` of the F-score.
    pub beta2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beta2: 0.3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GavsConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub sap: SapConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl GavsConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.d_v % 8 != 0 {
            return Err(Error::Config(alloc::format!("d_v {} must be divisible by 8", self.encoder.d_v)));
        }
        if self.train.margin <= 0.0 {
            return Err(Error::Config("train.margin must be positive".into()));
        }
        if self.train.lambda < 0.0 {
            return Err(Error::Config("train.lambda must be non-negative".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.num_classes == 0 {
            return Err(Error::Config("train.num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Mask side lengths `(4H, 4W)`.
    pub fn mask_size(&self) -> (usize, usize) {
        let (h, w) = self.encoder.grid();
        (4 * h, 4 * w)
    }
}
