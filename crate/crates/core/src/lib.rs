pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod downstream;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod pretraining;

pub use backbone::{EncoderConfig, ForwardCtx};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, Sample, Split, SyntheticDatasetSpec, SyntheticKind};
pub use downstream::{ClassificationConfig, PartSegConfig};
pub use error::{Error, Result};
pub use geometry::{PatchSet, Point, PointCloud};
pub use model::{ModelConfig, PointEncoder};
pub use numerics::{strict_mode, DType, Element};
pub use pretraining::{MaskStrategy, Mode, PretrainConfig, Pretrainer};
