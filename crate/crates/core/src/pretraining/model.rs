use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Mode;
use super::mask::{generate_mask, MaskLayout, MaskStrategy};
use crate::backbone::{Encoder, EncoderConfig, ForwardCtx, LayerOutputs};
use crate::embedding::PointNetDims;
use crate::error::{Error, Result};
use crate::geometry::{tokenize, PatchSet, PointCloud};
use crate::model::{Embedded, ModelConfig, PointEncoder};
use crate::numerics::gradcheck::{check_module, GradCheck};
use crate::numerics::nn::{join, trunc_normal, INIT_STD};
use crate::numerics::{smooth_l1, Element, Module, Tensor};

/// LN each of the last `k` layers, average, LN again. No affine terms and
/// no gradient.
pub fn build_targets<T: Element>(layers: &LayerOutputs<T>, k: usize) -> Result<Tensor<T>> {
    let depth = layers.len();
    if k == 0 || k > depth {
        return Err(Error::param(format!(
            "cannot average the last {k} of {depth} blocks"
        )));
    }
    let eps = crate::numerics::nn::LN_EPS;
    let mut acc: Option<Tensor<T>> = None;
    for l in &layers.layers[depth - k..] {
        let n = l.detach().layer_norm(eps, None)?;
        acc = Some(match acc {
            Some(a) => a.add(&n)?,
            None => n,
        });
    }
    acc.expect("k >= 1")
        .scale(1.0 / k as f64)?
        .layer_norm(eps, None)
}

/// Flat `[B * n]` row indices of masked and visible tokens, batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMask {
    pub batch: usize,
    pub tokens: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl BatchMask {
    pub fn new(layouts: &[MaskLayout]) -> Result<Self> {
        let first = layouts.first().ok_or_else(|| Error::param("empty batch"))?;
        let (n, m) = (first.len(), first.masked_count());
        let mut masked = Vec::with_capacity(layouts.len() * m);
        let mut visible = Vec::with_capacity(layouts.len() * (n - m));
        for (b, l) in layouts.iter().enumerate() {
            if l.len() != n || l.masked_count() != m {
                return Err(Error::param(
                    "all masks in a batch need the same token and mask counts",
                ));
            }
            if m == 0 {
                return Err(Error::param("mask layout hides no tokens"));
            }
            masked.extend(l.masked().into_iter().map(|i| b * n + i));
            visible.extend(l.visible().into_iter().map(|i| b * n + i));
        }
        Ok(Self {
            batch: layouts.len(),
            tokens: n,
            masked,
            visible,
        })
    }

    pub fn masked_per_sample(&self) -> usize {
        self.masked.len() / self.batch
    }

    /// For every flat slot, its row in `concat([visible rows, masked rows])`.
    fn assembly_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.batch * self.tokens];
        for (r, &slot) in self.visible.iter().chain(&self.masked).enumerate() {
            order[slot] = r;
        }
        order
    }
}

pub struct PretrainOutput<T: Element> {
    pub loss: Tensor<T>,
    /// `[B, n, E]` for every slot.
    pub predictions: Tensor<T>,
    pub targets: Tensor<T>,
    pub student: LayerOutputs<T>,
}

/// Student network, its EMA teacher, decoder, and mask embedding.
///
/// The teacher is a full untracked copy of the student, embeddings
/// included, so targets only move as fast as the EMA allows.
#[derive(Debug, Clone)]
pub struct PretrainModel<T: Element> {
    pub mode: Mode,
    pub student: PointEncoder<T>,
    pub teacher: PointEncoder<T>,
    pub decoder: Option<Encoder<T>>,
    pub mask_embedding: Tensor<T>,
}

impl<T: Element> PretrainModel<T> {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        mode: Mode,
        decoder_depth: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let student = PointEncoder::new(config, rng)?;
        let decoder = match (mode, decoder_depth) {
            (Mode::Point2vec, Some(depth)) => Some(Encoder::new(
                EncoderConfig {
                    depth,
                    drop_path: 0.0,
                    ..config.encoder
                },
                rng,
            )?),
            (Mode::Point2vec, None) => return Err(Error::param("point2vec mode needs a decoder")),
            (Mode::Data2vecPc, Some(_)) => {
                return Err(Error::param("data2vec_pc mode has no decoder"))
            }
            (Mode::Data2vecPc, None) => None,
        };
        let mask_embedding = Tensor::param(trunc_normal(vec![config.dim()], INIT_STD, rng));
        Ok(Self {
            mode,
            teacher: student.detached_copy(),
            student,
            decoder,
            mask_embedding,
        })
    }

    pub fn dim(&self) -> usize {
        self.student.config.dim()
    }

    /// Teacher targets over all tokens of the uncorrupted view.
    pub fn targets(&self, sets: &[PatchSet], k: usize) -> Result<Tensor<T>> {
        let layers = self.teacher.forward(sets, &mut ForwardCtx::eval())?;
        build_targets(&layers, k)
    }

    /// point2vec: encoder over visible tokens only, `[B, n - m, E]`.
    /// data2vec_pc: masked tokens swapped for the mask embedding, all
    /// positions kept, `[B, n, E]`.
    pub fn student_forward(
        &self,
        emb: &Embedded<T>,
        mask: &BatchMask,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LayerOutputs<T>> {
        let (b, n, e) = (mask.batch, mask.tokens, self.dim());
        let shape = emb.patches.shape();
        if shape != [b, n, e] {
            return Err(Error::Shape {
                op: "student_forward",
                lhs: shape,
                rhs: vec![b, n, e],
            });
        }
        let flat_tokens = emb.patches.reshape(vec![b * n, e])?;
        match self.mode {
            Mode::Point2vec => {
                let v = mask.visible.len() / b;
                let tokens = flat_tokens
                    .gather_rows(&mask.visible)?
                    .reshape(vec![b, v, e])?;
                let pos = emb
                    .pos
                    .reshape(vec![b * n, e])?
                    .gather_rows(&mask.visible)?
                    .reshape(vec![b, v, e])?;
                self.student.encoder.forward(&tokens, &pos, ctx)
            }
            Mode::Data2vecPc => {
                let with_mask = Tensor::concat(
                    &[&flat_tokens, &self.mask_embedding.reshape(vec![1, e])?],
                    0,
                )?;
                let mut rows: Vec<usize> = (0..b * n).collect();
                for &i in &mask.masked {
                    rows[i] = b * n;
                }
                let tokens = with_mask.gather_rows(&rows)?.reshape(vec![b, n, e])?;
                self.student.encoder.forward(&tokens, &emb.pos, ctx)
            }
        }
    }

    /// Places student outputs back in their slots, fills masked slots with
    /// the mask embedding, and runs the decoder over all `n` tokens.
    pub fn decoder_forward(
        &self,
        student_out: &Tensor<T>,
        pos: &Tensor<T>,
        mask: &BatchMask,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LayerOutputs<T>> {
        let decoder = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::param("decoder_forward called in data2vec_pc mode"))?;
        let (b, n, e) = (mask.batch, mask.tokens, self.dim());
        if mask.masked.is_empty() {
            return Err(Error::param("decoder needs at least one masked token"));
        }
        let visible = student_out.reshape(vec![mask.visible.len(), e])?;
        let fill = self
            .mask_embedding
            .reshape(vec![1, e])?
            .broadcast_to(&[mask.masked.len(), e])?;
        let seq = Tensor::concat(&[&visible, &fill], 0)?
            .gather_rows(&mask.assembly_order())?
            .reshape(vec![b, n, e])?;
        decoder.forward(&seq, pos, ctx)
    }

    /// Forward pass and masked Smooth L1 loss for one tokenized batch.
    pub fn forward(
        &self,
        sets: &[PatchSet],
        layouts: &[MaskLayout],
        target_layers: usize,
        beta: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<PretrainOutput<T>> {
        let targets = self.targets(sets, target_layers)?;
        let emb = self.student.embed(sets)?;
        self.forward_embedded(&emb, layouts, targets, beta, ctx)
    }

    /// Like [`PretrainModel::forward`] with the regression targets supplied.
    pub fn forward_with_targets(
        &self,
        sets: &[PatchSet],
        layouts: &[MaskLayout],
        targets: Tensor<T>,
        beta: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<PretrainOutput<T>> {
        let emb = self.student.embed(sets)?;
        self.forward_embedded(&emb, layouts, targets, beta, ctx)
    }

    fn forward_embedded(
        &self,
        emb: &Embedded<T>,
        layouts: &[MaskLayout],
        targets: Tensor<T>,
        beta: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<PretrainOutput<T>> {
        let mask = BatchMask::new(layouts)?;
        let student = self.student_forward(emb, &mask, ctx)?;
        let predictions = match self.mode {
            Mode::Point2vec => self
                .decoder_forward(student.last(), &emb.pos, &mask, ctx)?
                .last()
                .clone(),
            Mode::Data2vecPc => student.last().clone(),
        };
        if targets.shape() != predictions.shape() {
            return Err(Error::Shape {
                op: "pretrain_targets",
                lhs: predictions.shape(),
                rhs: targets.shape(),
            });
        }
        let loss = masked_loss(&predictions, &targets, &mask, beta)?;
        Ok(PretrainOutput {
            loss,
            predictions,
            targets,
            student,
        })
    }

    /// Parameters updated by the optimizer. Final encoder norms are left
    /// out since no pretraining loss reaches them.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .student
            .named_params("student")
            .into_iter()
            .filter(|(n, _)| n != "student.encoder.norm.gamma" && n != "student.encoder.norm.beta")
            .collect();
        if let Some(d) = &self.decoder {
            out.extend(
                d.named_params("decoder")
                    .into_iter()
                    .filter(|(n, _)| !n.starts_with("decoder.norm.")),
            );
        }
        out.push(("mask_embedding".into(), self.mask_embedding.clone()));
        out
    }
}

impl<T: Element> Module<T> for PretrainModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.student.visit_params(&join(prefix, "student"), f);
        self.teacher.visit_params(&join(prefix, "teacher"), f);
        if let Some(d) = &self.decoder {
            d.visit_params(&join(prefix, "decoder"), f);
        }
        f(join(prefix, "mask_embedding"), &self.mask_embedding);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            mode: self.mode,
            student: self.student.map_params(f),
            teacher: self.teacher.map_params(f),
            decoder: self.decoder.as_ref().map(|d| d.map_params(f)),
            mask_embedding: f(&self.mask_embedding),
        }
    }
}

/// Smooth L1 over the masked rows only.
pub fn masked_loss<T: Element>(
    predictions: &Tensor<T>,
    targets: &Tensor<T>,
    mask: &BatchMask,
    beta: f64,
) -> Result<Tensor<T>> {
    let e = *predictions.shape().last().unwrap_or(&0);
    let rows = mask.batch * mask.tokens;
    let p = predictions
        .reshape(vec![rows, e])?
        .gather_rows(&mask.masked)?;
    let t = targets.reshape(vec![rows, e])?.gather_rows(&mask.masked)?;
    smooth_l1(&p, &t, beta)
}

/// Finite-difference check of one full pretraining loss on a 4-token toy
/// model, with respect to every parameter. Targets are computed once and
/// held fixed, since the optimizer treats them as constants.
pub fn toy_gradient_check(mode: Mode, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
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
    };
    let decoder_depth = (mode == Mode::Point2vec).then_some(1);
    let model = PretrainModel::<f64>::new(config, mode, decoder_depth, &mut rng)?;
    let sets = (0..2)
        .map(|_| {
            let points = (0..24)
                .map(|_| [0; 3].map(|_: u8| rng.random_range(-1.0f32..1.0)))
                .collect();
            tokenize(&PointCloud::new(points)?, 4, 4, rng.random())
        })
        .collect::<Result<Vec<_>>>()?;
    let layouts = sets
        .iter()
        .map(|s| generate_mask(&s.centers, MaskStrategy::Random, 0.5, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let targets = model.targets(&sets, 2)?;
    check_module(format!("pretrain_step[{}]", mode.name()), &model, |m| {
        Ok(m.forward_with_targets(
            &sets,
            &layouts,
            targets.clone(),
            2.0,
            &mut ForwardCtx::eval(),
        )?
        .loss)
    })
}
