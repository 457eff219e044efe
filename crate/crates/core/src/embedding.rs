//! Patch and position embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PatchSet, Point};
use crate::numerics::nn::join;
use crate::numerics::{Array, Element, Linear, Module, NormMlp, Tensor};

/// Widths of the two shared MLPs of the mini-PointNet, `[hidden, output]`
/// each. The second MLP's input is twice the first's output (per-point
/// features concatenated with their max-pooled patch feature).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointNetDims {
    pub first: [usize; 2],
    pub second: [usize; 2],
}

impl Default for PointNetDims {
    fn default() -> Self {
        Self {
            first: [128, 256],
            second: [512, 384],
        }
    }
}

impl PointNetDims {
    pub fn output(&self) -> usize {
        self.second[1]
    }
}

/// Permutation-invariant encoder of one normalized point patch.
#[derive(Debug, Clone)]
pub struct MiniPointNet<T: Element> {
    pub first: NormMlp<T>,
    pub second: NormMlp<T>,
}

impl<T: Element> MiniPointNet<T> {
    pub fn new<R: Rng + ?Sized>(dims: PointNetDims, rng: &mut R) -> Self {
        let [h1, o1] = dims.first;
        let [h2, o2] = dims.second;
        Self {
            first: NormMlp::new(3, h1, o1, rng),
            second: NormMlp::new(2 * o1, h2, o2, rng),
        }
    }

    /// `[G, k, 3]` normalized patches to `[G, E]` embeddings.
    pub fn forward(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = patches.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[1] == 0 {
            return Err(Error::Shape {
                op: "embed_patches",
                lhs: shape,
                rhs: vec![0, 0, 3],
            });
        }
        if !patches.value().all_finite() {
            return Err(Error::NonFinite("patch coordinates".into()));
        }
        let (g, k) = (shape[0], shape[1]);
        let local = self.first.forward(patches)?;
        let width = local.shape()[2];
        let pooled = local.max_axis(1, true)?.broadcast_to(&[g, k, width])?;
        let joined = Tensor::concat(&[&pooled, &local], 2)?;
        self.second.forward(&joined)?.max_axis(1, false)
    }
}

impl<T: Element> Module<T> for MiniPointNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.first.visit_params(&join(prefix, "first"), f);
        self.second.visit_params(&join(prefix, "second"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            first: self.first.map_params(f),
            second: self.second.map_params(f),
        }
    }
}

/// Two-layer MLP from a center coordinate to a position embedding.
#[derive(Debug, Clone)]
pub struct PositionalEncoder<T: Element> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> PositionalEncoder<T> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(3, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
        }
    }

    /// `[.., 3]` centers to `[.., E]`.
    pub fn forward(&self, centers: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(centers)?.gelu()?)
    }
}

impl<T: Element> Module<T> for PositionalEncoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            fc1: self.fc1.map_params(f),
            fc2: self.fc2.map_params(f),
        }
    }
}

/// Stacks the normalized patches of a batch into `[B * n, k, 3]`.
pub fn patches_tensor<T: Element>(sets: &[PatchSet]) -> Result<Tensor<T>> {
    let first = sets.first().ok_or_else(|| Error::param("empty batch"))?;
    let (n, k) = (first.len(), first.group_size);
    let mut data = Vec::with_capacity(sets.len() * n * k * 3);
    for s in sets {
        if s.len() != n || s.group_size != k {
            return Err(Error::param("patch sets in a batch must share n and k"));
        }
        data.extend(s.normalized.iter().map(|&x| T::lit(x)));
    }
    Ok(Tensor::constant(Array::new(
        vec![sets.len() * n, k, 3],
        data,
    )?))
}

/// Centers of a batch as `[B, n, 3]`.
pub fn centers_tensor<T: Element>(sets: &[PatchSet]) -> Result<Tensor<T>> {
    let first = sets.first().ok_or_else(|| Error::param("empty batch"))?;
    let n = first.len();
    let mut data = Vec::with_capacity(sets.len() * n * 3);
    for s in sets {
        if s.len() != n {
            return Err(Error::param("patch sets in a batch must share n"));
        }
        data.extend(s.centers.iter().flatten().map(|&x| T::lit(x as f64)));
    }
    Ok(Tensor::constant(Array::new(vec![sets.len(), n, 3], data)?))
}

pub fn points_tensor<T: Element>(points: &[Point]) -> Result<Tensor<T>> {
    let data = points.iter().flatten().map(|&x| T::lit(x as f64)).collect();
    Ok(Tensor::constant(Array::new(vec![points.len(), 3], data)?))
}
