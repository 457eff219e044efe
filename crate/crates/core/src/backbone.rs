//! Pre-norm Transformer encoder with position embeddings re-added before
//! every block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::join;
use crate::numerics::{Element, LayerNorm, Linear, Module, Tensor};

/// Training flag plus the generator that drives dropout and drop path.
pub struct ForwardCtx<'a> {
    pub training: bool,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
        }
    }

    pub fn dropout<T: Element>(&mut self, x: &Tensor<T>, rate: f64) -> Result<Tensor<T>> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => x.dropout(rate, true, &mut **rng),
            _ => x.dropout(rate, false, &mut NoRng),
        }
    }

    pub fn drop_path<T: Element>(&mut self, x: &Tensor<T>, rate: f64) -> Result<Tensor<T>> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => x.drop_path(rate, true, &mut **rng),
            _ => x.drop_path(rate, false, &mut NoRng),
        }
    }
}

/// Generator handed to regularizers in eval mode, where they never sample.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode regularizers do not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode regularizers do not sample")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval-mode regularizers do not sample")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Drop-path rate of the last block; block `i` uses `i / (depth - 1)` of it.
    pub drop_path: f64,
    pub attn_dropout: f64,
    pub proj_dropout: f64,
    pub qkv_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            dim: 384,
            heads: 6,
            mlp_ratio: 4,
            drop_path: 0.0,
            attn_dropout: 0.0,
            proj_dropout: 0.0,
            qkv_bias: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::param("encoder depth must be at least 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "dimension {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::param("mlp_ratio must be positive"));
        }
        for (name, r) in [
            ("drop_path", self.drop_path),
            ("attn_dropout", self.attn_dropout),
            ("proj_dropout", self.proj_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::param(format!("{name} {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Per-block drop-path rates, linearly spaced from 0 to `drop_path`.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        if self.depth <= 1 {
            return vec![0.0; self.depth];
        }
        (0..self.depth)
            .map(|i| self.drop_path * i as f64 / (self.depth - 1) as f64)
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct Attention<T: Element> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
}

impl<T: Element> Attention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, qkv_bias: bool, rng: &mut R) -> Self {
        Self {
            heads,
            q: Linear::new(dim, dim, qkv_bias, rng),
            k: Linear::new(dim, dim, qkv_bias, rng),
            v: Linear::new(dim, dim, qkv_bias, rng),
            proj: Linear::new(dim, dim, true, rng),
        }
    }

    /// `[B, T, E]` to `[B, H, T, E / H]`.
    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, t, e) = (s[0], s[1], s[2]);
        x.reshape(vec![b, t, self.heads, e / self.heads])?
            .permute(&[0, 2, 1, 3])
    }

    /// Attention probabilities `[B, H, T, T]`.
    pub fn weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "attention",
                lhs: s,
                rhs: vec![0, 0, 0],
            });
        }
        let head_dim = s[2] / self.heads;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        q.matmul(&k.transpose_last()?)?
            .scale(1.0 / (head_dim as f64).sqrt())?
            .softmax()
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        cfg: &EncoderConfig,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Tensor<T>> {
        let s = x.shape();
        let attn = ctx.dropout(&self.weights(x)?, cfg.attn_dropout)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let mixed = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(s)?;
        ctx.dropout(&self.proj.forward(&mixed)?, cfg.proj_dropout)
    }
}

impl<T: Element> Module<T> for Attention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            heads: self.heads,
            q: self.q.map_params(f),
            k: self.k.map_params(f),
            v: self.v.map_params(f),
            proj: self.proj.map_params(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Element> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> Block<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(cfg.dim),
            attn: Attention::new(cfg.dim, cfg.heads, cfg.qkv_bias, rng),
            norm2: LayerNorm::new(cfg.dim),
            fc1: Linear::new(cfg.dim, cfg.dim * cfg.mlp_ratio, true, rng),
            fc2: Linear::new(cfg.dim * cfg.mlp_ratio, cfg.dim, true, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        cfg: &EncoderConfig,
        drop_path: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Tensor<T>> {
        let a = self.attn.forward(&self.norm1.forward(x)?, cfg, ctx)?;
        let x = x.add(&ctx.drop_path(&a, drop_path)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        let h = ctx.dropout(&self.fc2.forward(&h)?, cfg.proj_dropout)?;
        x.add(&ctx.drop_path(&h, drop_path)?)
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            norm1: self.norm1.map_params(f),
            attn: self.attn.map_params(f),
            norm2: self.norm2.map_params(f),
            fc1: self.fc1.map_params(f),
            fc2: self.fc2.map_params(f),
        }
    }
}

/// Raw outputs of every block, first to last.
#[derive(Debug, Clone)]
pub struct LayerOutputs<T: Element> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Element> LayerOutputs<T> {
    pub fn last(&self) -> &Tensor<T> {
        self.layers.last().expect("depth >= 1")
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Mean of the outputs of the given 1-indexed blocks.
    pub fn average_blocks(&self, blocks: &[usize]) -> Result<Tensor<T>> {
        if blocks.is_empty() {
            return Err(Error::param("no blocks to average"));
        }
        let mut acc: Option<Tensor<T>> = None;
        for &b in blocks {
            if b == 0 || b > self.layers.len() {
                return Err(Error::param(format!(
                    "block {b} requested from an encoder of depth {}",
                    self.layers.len()
                )));
            }
            let l = &self.layers[b - 1];
            acc = Some(match acc {
                Some(a) => a.add(l)?,
                None => l.clone(),
            });
        }
        acc.expect("non-empty").scale(1.0 / blocks.len() as f64)
    }
}

/// Where position embeddings enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosInjection {
    EveryBlock,
    FirstOnly,
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Element> {
    pub config: EncoderConfig,
    pub blocks: Vec<Block<T>>,
    /// Applied by downstream heads; never part of [`LayerOutputs`].
    pub norm: LayerNorm<T>,
}

impl<T: Element> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            blocks: (0..config.depth)
                .map(|_| Block::new(&config, rng))
                .collect(),
            norm: LayerNorm::new(config.dim),
            config,
        })
    }

    pub fn forward(
        &self,
        tokens: &Tensor<T>,
        pos: &Tensor<T>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LayerOutputs<T>> {
        self.forward_with(tokens, pos, PosInjection::EveryBlock, ctx)
    }

    pub fn forward_with(
        &self,
        tokens: &Tensor<T>,
        pos: &Tensor<T>,
        injection: PosInjection,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LayerOutputs<T>> {
        let (ts, ps) = (tokens.shape(), pos.shape());
        if ts != ps || ts.len() != 3 || ts[2] != self.config.dim {
            return Err(Error::Shape {
                op: "encoder_forward",
                lhs: ts,
                rhs: ps,
            });
        }
        let rates = self.config.drop_path_rates();
        let mut x = tokens.clone();
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, (block, &rate)) in self.blocks.iter().zip(&rates).enumerate() {
            if i == 0 || injection == PosInjection::EveryBlock {
                x = x.add(pos)?;
            }
            x = block.forward(&x, &self.config, rate, ctx)?;
            layers.push(x.clone());
        }
        Ok(LayerOutputs { layers })
    }
}

impl<T: Element> Module<T> for Encoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.blocks.visit_params(&join(prefix, "blocks"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            config: self.config,
            blocks: self.blocks.map_params(f),
            norm: self.norm.map_params(f),
        }
    }
}
