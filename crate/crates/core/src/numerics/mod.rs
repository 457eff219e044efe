//! Dense tensors with reverse-mode differentiation, the neural building
//! blocks of the pipeline, AdamW, and the learning-rate schedule.

mod array;
mod element;
pub mod gradcheck;
pub mod nn;
mod ops;
mod optim;
mod schedule;
mod tensor;

pub use array::Array;
pub use element::{DType, Element};
pub use nn::{LayerNorm, Linear, Module, NormMlp};
pub use ops::{label_smoothing_cross_entropy, smooth_l1};
pub use optim::{AdamW, AdamWConfig, AdamWState, Moments};
pub use schedule::LrSchedule;
pub use tensor::{is_strict, set_strict, strict_mode, StrictGuard, Tensor};

/// Central finite-difference gradient of a scalar function.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
