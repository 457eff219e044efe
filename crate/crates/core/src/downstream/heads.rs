use rand::Rng;

use crate::backbone::{ForwardCtx, LayerOutputs};
use crate::error::{Error, Result};
use crate::geometry::{interpolation_weights, PatchSet, Point, Propagation};
use crate::model::PointEncoder;
use crate::numerics::nn::join;
use crate::numerics::{Array, Element, LayerNorm, Linear, Module, Tensor};

/// Linear, layer norm, GELU.
#[derive(Debug, Clone)]
pub struct HiddenLayer<T: Element> {
    pub fc: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Element> HiddenLayer<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(input, output, true, rng),
            norm: LayerNorm::new(output),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.norm.forward(&self.fc.forward(x)?)?.gelu()
    }
}

impl<T: Element> Module<T> for HiddenLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc.visit_params(&join(prefix, "fc"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            fc: self.fc.map_params(f),
            norm: self.norm.map_params(f),
        }
    }
}

/// Hidden layers with dropout after each, then a linear output layer.
#[derive(Debug, Clone)]
pub struct MlpHead<T: Element> {
    pub hidden: Vec<HiddenLayer<T>>,
    pub out: Linear<T>,
    pub dropout: f64,
}

impl<T: Element> MlpHead<T> {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if output == 0 || hidden.contains(&0) {
            return Err(Error::param("head widths must be positive"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::param(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut width = input;
        let layers = hidden
            .iter()
            .map(|&h| {
                let l = HiddenLayer::new(width, h, rng);
                width = h;
                l
            })
            .collect();
        Ok(Self {
            hidden: layers,
            out: Linear::new(width, output, true, rng),
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let mut x = x.clone();
        for l in &self.hidden {
            x = ctx.dropout(&l.forward(&x)?, self.dropout)?;
        }
        self.out.forward(&x)
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }
}

impl<T: Element> Module<T> for MlpHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            hidden: self.hidden.map_params(f),
            out: self.out.map_params(f),
            dropout: self.dropout,
        }
    }
}

/// `[B, n, E]` tokens to `[B, 2E]`: mean then max over tokens.
pub fn mean_max_pool<T: Element>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::concat(
        &[&tokens.mean_axis(1, false)?, &tokens.max_axis(1, false)?],
        1,
    )
}

/// Final-normed last block, mean+max pooled, through the head.
pub fn classify_forward<T: Element>(
    layers: &LayerOutputs<T>,
    norm: &LayerNorm<T>,
    head: &MlpHead<T>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor<T>> {
    head.forward(&mean_max_pool(&norm.forward(layers.last())?)?, ctx)
}

/// Whether gradients reach the point encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderGrad {
    Train,
    Frozen,
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Element> {
    pub encoder: PointEncoder<T>,
    pub head: MlpHead<T>,
}

impl<T: Element> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(
        encoder: PointEncoder<T>,
        hidden: &[usize],
        classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let head = MlpHead::new(2 * encoder.config.dim(), hidden, classes, dropout, rng)?;
        Ok(Self { encoder, head })
    }

    /// Logits `[B, classes]`.
    pub fn forward(
        &self,
        sets: &[PatchSet],
        grad: EncoderGrad,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Tensor<T>> {
        let layers = self.encoder.forward(sets, ctx)?;
        let mut pooled = mean_max_pool(&self.encoder.encoder.norm.forward(layers.last())?)?;
        if grad == EncoderGrad::Frozen {
            pooled = pooled.detach();
        }
        self.head.forward(&pooled, ctx)
    }
}

impl<T: Element> Module<T> for Classifier<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            encoder: self.encoder.map_params(f),
            head: self.head.map_params(f),
        }
    }
}

/// 1-indexed blocks whose outputs feed the segmentation head.
pub const PARTSEG_BLOCKS: [usize; 3] = [4, 8, 12];

/// Per-point part classifier on top of propagated token features.
#[derive(Debug, Clone)]
pub struct PartSegHead<T: Element> {
    /// Shared MLP applied after inverse-distance upsampling.
    pub propagation: HiddenLayer<T>,
    pub mlp: MlpHead<T>,
    pub object_classes: usize,
    pub interpolation: Propagation,
}

impl<T: Element> PartSegHead<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        propagation_dim: usize,
        hidden: &[usize],
        object_classes: usize,
        parts: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            propagation: HiddenLayer::new(dim, propagation_dim, rng),
            mlp: MlpHead::new(
                propagation_dim + 2 * dim + object_classes,
                hidden,
                parts,
                dropout,
                rng,
            )?,
            object_classes,
            interpolation: Propagation::default(),
        })
    }
}

impl<T: Element> Module<T> for PartSegHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.propagation
            .visit_params(&join(prefix, "propagation"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            propagation: self.propagation.map_params(f),
            mlp: self.mlp.map_params(f),
            object_classes: self.object_classes,
            interpolation: self.interpolation,
        }
    }
}

/// Per-point logits `[B, P, parts]` from averaged block outputs.
///
/// `tokens` is `[B, n, E]`; every sample has the same point count `P`.
pub fn partseg_forward<T: Element>(
    tokens: &Tensor<T>,
    centers: &[&[Point]],
    points: &[&[Point]],
    object_class: &[usize],
    head: &PartSegHead<T>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor<T>> {
    let shape = tokens.shape();
    let b = centers.len();
    if shape.len() != 3 || shape[0] != b || points.len() != b || object_class.len() != b {
        return Err(Error::param(
            "part segmentation batch pieces disagree in size",
        ));
    }
    let (n, e) = (shape[1], shape[2]);
    let p = points.first().map_or(0, |s| s.len());
    let mut weights = Vec::with_capacity(b * p * n);
    for (c, pts) in centers.iter().zip(points) {
        if c.len() != n || pts.len() != p {
            return Err(Error::param(
                "every sample needs the same point and center counts",
            ));
        }
        weights.extend(interpolation_weights::<T>(pts, c, head.interpolation)?.into_data());
    }
    let w = Tensor::constant(Array::new(vec![b, p, n], weights)?);
    let local = head.propagation.forward(&w.matmul(tokens)?)?;

    let mut onehot = vec![T::zero(); b * head.object_classes];
    for (i, &c) in object_class.iter().enumerate() {
        if c >= head.object_classes {
            return Err(Error::param(format!("object class {c} out of range")));
        }
        onehot[i * head.object_classes + c] = T::one();
    }
    let onehot = Tensor::constant(Array::new(vec![b, head.object_classes], onehot)?);
    let global = Tensor::concat(&[&mean_max_pool(tokens)?, &onehot], 1)?;
    let global = global
        .reshape(vec![b, 1, 2 * e + head.object_classes])?
        .broadcast_to(&[b, p, 2 * e + head.object_classes])?;
    head.mlp
        .forward(&Tensor::concat(&[&local, &global], 2)?, ctx)
}

#[derive(Debug, Clone)]
pub struct Segmenter<T: Element> {
    pub encoder: PointEncoder<T>,
    pub head: PartSegHead<T>,
}

impl<T: Element> Segmenter<T> {
    pub fn new(encoder: PointEncoder<T>, head: PartSegHead<T>) -> Result<Self> {
        let depth = encoder.config.encoder.depth;
        if depth < PARTSEG_BLOCKS[2] {
            return Err(Error::param(format!(
                "part segmentation reads block {} but the encoder has depth {depth}",
                PARTSEG_BLOCKS[2]
            )));
        }
        Ok(Self { encoder, head })
    }

    /// Logits `[B, P, parts]` for the points of each cloud.
    pub fn forward(
        &self,
        sets: &[PatchSet],
        points: &[&[Point]],
        object_class: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Tensor<T>> {
        let layers = self.encoder.forward(sets, ctx)?;
        let tokens = self
            .encoder
            .encoder
            .norm
            .forward(&layers.average_blocks(&PARTSEG_BLOCKS)?)?;
        let centers: Vec<&[Point]> = sets.iter().map(|s| s.centers.as_slice()).collect();
        partseg_forward(&tokens, &centers, points, object_class, &self.head, ctx)
    }
}

impl<T: Element> Module<T> for Segmenter<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            encoder: self.encoder.map_params(f),
            head: self.head.map_params(f),
        }
    }
}
