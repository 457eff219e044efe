//! Moving weights between pretraining and downstream checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::Classifier;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PointEncoder};
use crate::numerics::{DType, Element};
use crate::pretraining::{Mode, PRETRAIN_KIND};

pub const CLASSIFIER_KIND: &str = "classifier";

/// The student encoder of a pretraining checkpoint.
#[derive(Debug, Clone)]
pub struct PretrainedEncoder<T: Element> {
    pub encoder: PointEncoder<T>,
    pub mode: Mode,
    /// Whether the checkpoint carried decoder weights (which are dropped).
    pub had_decoder: bool,
    pub epoch: u64,
}

#[derive(Deserialize)]
struct Header {
    kind: String,
    dtype: DType,
    model: ModelConfig,
    #[serde(default)]
    mode: Option<Mode>,
    #[serde(default)]
    epoch: u64,
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| {
        let mut c = *c;
        c.encoder.drop_path = 0.0;
        c.encoder.attn_dropout = 0.0;
        c.encoder.proj_dropout = 0.0;
        c
    };
    strip(a) == strip(b)
}

fn header<T: Element>(
    ckpt: &Checkpoint,
    kind: &str,
    expected: Option<&ModelConfig>,
) -> Result<Header> {
    let h: Header = ckpt.meta()?;
    if h.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found `{}`",
            h.kind
        )));
    }
    if h.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {:?} weights, expected {:?}",
            h.dtype,
            T::DTYPE
        )));
    }
    if let Some(want) = expected {
        if !same_architecture(&h.model, want) {
            return Err(Error::Checkpoint(format!(
                "checkpoint model {:?} does not match configured model {:?}",
                h.model, want
            )));
        }
    }
    h.model.validate()?;
    Ok(h)
}

/// Loads the student of a pretraining checkpoint of either mode. Dropout
/// and drop-path rates come from `expected` when given.
pub fn load_pretrained_encoder<T: Element>(
    ckpt: &Checkpoint,
    expected: Option<&ModelConfig>,
) -> Result<PretrainedEncoder<T>> {
    let h = header::<T>(ckpt, PRETRAIN_KIND, expected)?;
    let config = expected.copied().unwrap_or(h.model);
    let encoder = PointEncoder::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_module("student", &encoder)?;
    Ok(PretrainedEncoder {
        encoder,
        mode: h
            .mode
            .ok_or_else(|| Error::Checkpoint("pretraining checkpoint without a mode".into()))?,
        had_decoder: ckpt.has_prefix("decoder."),
        epoch: h.epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub kind: String,
    pub dtype: DType,
    pub model: ModelConfig,
    pub classes: Vec<String>,
    pub head_hidden: Vec<usize>,
    pub head_dropout: f64,
    pub epoch: u64,
}

pub fn save_classifier<T: Element>(
    model: &Classifier<T>,
    classes: &[String],
    head_hidden: &[usize],
    head_dropout: f64,
    epoch: u64,
) -> Result<Checkpoint> {
    let meta = ClassifierMeta {
        kind: CLASSIFIER_KIND.into(),
        dtype: T::DTYPE,
        model: model.encoder.config,
        classes: classes.to_vec(),
        head_hidden: head_hidden.to_vec(),
        head_dropout,
        epoch,
    };
    let mut ckpt = Checkpoint::new(&meta)?;
    ckpt.insert_module("", model)?;
    Ok(ckpt)
}

pub fn load_classifier<T: Element>(ckpt: &Checkpoint) -> Result<(Classifier<T>, ClassifierMeta)> {
    header::<T>(ckpt, CLASSIFIER_KIND, None)?;
    let meta: ClassifierMeta = ckpt.meta()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = PointEncoder::new(meta.model, &mut rng)?;
    let model = Classifier::new(
        encoder,
        &meta.head_hidden,
        meta.classes.len(),
        meta.head_dropout,
        &mut rng,
    )?;
    ckpt.load_module("", &model)?;
    Ok((model, meta))
}
