//! The network shared by pretraining and every downstream task:
//! patch embedding, position embedding, and the Transformer encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderConfig, ForwardCtx, LayerOutputs};
use crate::embedding::{
    centers_tensor, patches_tensor, MiniPointNet, PointNetDims, PositionalEncoder,
};
use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::numerics::nn::join;
use crate::numerics::{Element, Module, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pointnet: PointNetDims,
    pub pos_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pointnet: PointNetDims::default(),
            pos_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.pointnet.output() != self.encoder.dim {
            return Err(Error::Config {
                key: "model.pointnet.second".into(),
                msg: format!(
                    "patch embedding width {} differs from encoder dimension {}",
                    self.pointnet.output(),
                    self.encoder.dim
                ),
            });
        }
        if self.pos_hidden == 0
            || self.pointnet.first.contains(&0)
            || self.pointnet.second.contains(&0)
        {
            return Err(Error::Config {
                key: "model".into(),
                msg: "layer widths must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }
}

/// Token embeddings of a batch, each `[B, n, E]`.
#[derive(Debug, Clone)]
pub struct Embedded<T: Element> {
    pub patches: Tensor<T>,
    pub pos: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct PointEncoder<T: Element> {
    pub config: ModelConfig,
    pub patch_embed: MiniPointNet<T>,
    pub pos_embed: PositionalEncoder<T>,
    pub encoder: Encoder<T>,
}

impl<T: Element> PointEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            patch_embed: MiniPointNet::new(config.pointnet, rng),
            pos_embed: PositionalEncoder::new(config.pos_hidden, config.dim(), rng),
            encoder: Encoder::new(config.encoder, rng)?,
            config,
        })
    }

    pub fn embed(&self, sets: &[PatchSet]) -> Result<Embedded<T>> {
        let (b, n) = (sets.len(), sets.first().map_or(0, PatchSet::len));
        let e = self.config.dim();
        let patches = self
            .patch_embed
            .forward(&patches_tensor(sets)?)?
            .reshape(vec![b, n, e])?;
        let pos = self.pos_embed.forward(&centers_tensor(sets)?)?;
        Ok(Embedded { patches, pos })
    }

    pub fn forward(&self, sets: &[PatchSet], ctx: &mut ForwardCtx<'_>) -> Result<LayerOutputs<T>> {
        let emb = self.embed(sets)?;
        self.encoder.forward(&emb.patches, &emb.pos, ctx)
    }
}

impl<T: Element> Module<T> for PointEncoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.patch_embed
            .visit_params(&join(prefix, "patch_embed"), f);
        self.pos_embed.visit_params(&join(prefix, "pos_embed"), f);
        self.encoder.visit_params(&join(prefix, "encoder"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            config: self.config,
            patch_embed: self.patch_embed.map_params(f),
            pos_embed: self.pos_embed.map_params(f),
            encoder: self.encoder.map_params(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{tokenize, PointCloud};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                depth: 2,
                dim: 8,
                heads: 2,
                ..EncoderConfig::default()
            },
            pointnet: PointNetDims {
                first: [8, 8],
                second: [8, 8],
            },
            pos_hidden: 8,
        }
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut cfg = tiny_config();
        cfg.pointnet.second[1] = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = PointEncoder::<f32>::new(tiny_config(), &mut rng).unwrap();
        let pts = (0..40)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let sets = vec![
            tokenize(&cloud, 6, 5, 1).unwrap(),
            tokenize(&cloud, 6, 5, 2).unwrap(),
        ];
        let out = model.forward(&sets, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.last().shape(), vec![2, 6, 8]);
        let names: Vec<String> = model.named_params("").into_iter().map(|(n, _)| n).collect();
        assert!(
            names.contains(&"encoder.blocks.1.attn.q.weight".to_string()),
            "{names:?}"
        );
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
    }
}
