//! Parameterized building blocks and parameter traversal.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

use super::{Array, Element, Tensor};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// A collection of named parameters.
pub trait Module<T: Element> {
    /// Calls `f` with the fully qualified name of every parameter, in a
    /// stable order.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    /// Rebuilds the module with every parameter passed through `f`, visiting
    /// in the same order as [`Module::visit_params`].
    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self
    where
        Self: Sized;

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(prefix, &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Untracked deep copy (teacher weights, frozen snapshots).
    fn detached_copy(&self) -> Self
    where
        Self: Sized,
    {
        self.map_params(&mut |t| Tensor::constant(t.to_array()))
    }

    /// Tracked deep copy with fresh gradient buffers.
    fn tracked_copy(&self) -> Self
    where
        Self: Sized,
    {
        self.map_params(&mut |t| Tensor::param(t.to_array()))
    }

    fn zero_grad(&self) {
        self.visit_params("", &mut |_, t| t.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Truncated normal in `[-2 std, 2 std]`.
pub fn trunc_normal<T: Element, R: Rng + ?Sized>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut R,
) -> Array<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array::from_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break T::lit(x);
        }
    })
}

/// Affine map `x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Tensor::param(trunc_normal(vec![input, output], INIT_STD, rng)),
            bias: bias.then(|| Tensor::param(Array::zeros(vec![output]))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(f),
        }
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::param(Array::ones(vec![dim])),
            beta: Tensor::param(Array::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(LN_EPS, Some((&self.gamma, &self.beta)))
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

/// `Linear -> LayerNorm -> GELU -> Linear`, the two-layer shared MLP used
/// throughout the point embedding.
#[derive(Debug, Clone)]
pub struct NormMlp<T: Element> {
    pub fc1: Linear<T>,
    pub norm: LayerNorm<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> NormMlp<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(input, hidden, true, rng),
            norm: LayerNorm::new(hidden),
            fc2: Linear::new(hidden, output, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm.forward(&self.fc1.forward(x)?)?.gelu()?;
        self.fc2.forward(&h)
    }
}

impl<T: Element> Module<T> for NormMlp<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            fc1: self.fc1.map_params(f),
            norm: self.norm.map_params(f),
            fc2: self.fc2.map_params(f),
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        self.iter().map(|m| m.map_params(f)).collect()
    }
}
