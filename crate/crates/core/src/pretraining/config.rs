use serde::{Deserialize, Serialize};

use super::ema::EmaConfig;
use super::mask::MaskStrategy;
use crate::data::AugmentationSpec;
use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Student sees visible tokens only; a decoder fills in the masked slots.
    Point2vec,
    /// Mask embeddings replace masked tokens inside the student, positions
    /// included.
    Data2vecPc,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Point2vec => "point2vec",
            Mode::Data2vecPc => "data2vec_pc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mode: Mode,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    /// Number of trailing teacher blocks averaged into the targets.
    pub target_layers: usize,
    pub smooth_l1_beta: f64,
    /// Defaults to 4 in point2vec mode; must be unset in data2vec_pc mode.
    pub decoder_depth: Option<usize>,
    /// Defaults per mode: 512 (point2vec) or 2048 (data2vec_pc).
    pub batch_size: Option<usize>,
    pub epochs: u64,
    /// Defaults per mode: 1e-3 (point2vec) or 2e-3 (data2vec_pc).
    pub lr: Option<f64>,
    pub min_lr: f64,
    pub warmup_epochs: u64,
    pub optimizer: AdamWConfig,
    pub ema: EmaConfig,
    pub augmentation: AugmentationSpec,
    /// Points kept per cloud by FPS before tokenization.
    pub points: usize,
    pub centers: usize,
    pub group_size: usize,
    pub save_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Point2vec,
            mask_strategy: MaskStrategy::Random,
            mask_ratio: 0.65,
            target_layers: 6,
            smooth_l1_beta: 2.0,
            decoder_depth: None,
            batch_size: None,
            epochs: 800,
            lr: None,
            min_lr: 1e-6,
            warmup_epochs: 80,
            optimizer: AdamWConfig::default(),
            ema: EmaConfig::default(),
            augmentation: AugmentationSpec::pretrain(),
            points: 1024,
            centers: 64,
            group_size: 32,
            save_every: 50,
        }
    }
}

impl PretrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.mode {
            Mode::Point2vec => 512,
            Mode::Data2vecPc => 2048,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.mode {
            Mode::Point2vec => 1e-3,
            Mode::Data2vecPc => 2e-3,
        })
    }

    /// `None` in data2vec_pc mode.
    pub fn decoder_depth(&self) -> Option<usize> {
        match self.mode {
            Mode::Point2vec => Some(self.decoder_depth.unwrap_or(4)),
            Mode::Data2vecPc => None,
        }
    }

    pub fn validate(&self, encoder_depth: usize) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("pretrain.{key}"),
                msg,
            })
        };
        match (self.mode, self.decoder_depth) {
            (Mode::Data2vecPc, Some(_)) => {
                return bad("decoder_depth", "data2vec_pc mode has no decoder".into());
            }
            (Mode::Point2vec, Some(0)) => return bad("decoder_depth", "must be at least 1".into()),
            _ => {}
        }
        if !(1..=encoder_depth).contains(&self.target_layers) {
            return bad(
                "target_layers",
                format!("{} not in 1..={encoder_depth}", self.target_layers),
            );
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio", format!("{} outside (0, 1)", self.mask_ratio));
        }
        if self.smooth_l1_beta <= 0.0 {
            return bad("smooth_l1_beta", "must be positive".into());
        }
        if self.batch_size() == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.lr() > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr()) {
            return bad(
                "lr",
                format!(
                    "need 0 <= min_lr <= lr, got {} and {}",
                    self.min_lr,
                    self.lr()
                ),
            );
        }
        if self.warmup_epochs > self.epochs {
            return bad(
                "warmup_epochs",
                format!("{} exceeds {} epochs", self.warmup_epochs, self.epochs),
            );
        }
        if self.centers < 2
            || self.group_size == 0
            || self.centers > self.points
            || self.group_size > self.points
        {
            return bad(
                "centers",
                format!(
                    "{} centers of {} points from {}-point clouds",
                    self.centers, self.group_size, self.points
                ),
            );
        }
        if self.save_every == 0 {
            return bad("save_every", "must be positive".into());
        }
        self.ema.validate()?;
        self.augmentation.validate().map_err(|e| Error::Config {
            key: "pretrain.augmentation".into(),
            msg: e.to_string(),
        })
    }
}
