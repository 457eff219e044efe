//! Masked student-teacher pretraining.

mod config;
mod ema;
mod mask;
mod model;
mod trainer;

pub use config::{Mode, PretrainConfig};
pub use ema::{ema_decay_at, ema_update, EmaConfig};
pub use mask::{
    generate_mask, mask_count, mask_coverage, point_tags, MaskCoverage, MaskLayout, MaskStrategy,
};
pub use model::{
    build_targets, masked_loss, toy_gradient_check, BatchMask, PretrainModel, PretrainOutput,
};
pub use trainer::{PretrainMeta, Pretrainer, StepRecord, PRETRAIN_KIND};
