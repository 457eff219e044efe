use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Array, Element, Tensor};

/// AdamW hyperparameters. The learning rate is supplied per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Element> {
    pub m: Array<T>,
    pub v: Array<T>,
    /// Updates applied to this parameter (bias correction uses this count).
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T: Element> {
    pub moments: BTreeMap<String, Moments<T>>,
    /// Optimizer steps taken.
    pub t: u64,
}

impl<T: Element> Default for AdamWState<T> {
    fn default() -> Self {
        Self {
            moments: BTreeMap::new(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T: Element> {
    pub config: AdamWConfig,
    pub state: AdamWState<T>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamWState::default(),
        }
    }

    /// One update of every listed parameter from its accumulated gradient,
    /// followed by zeroing those gradients.
    ///
    /// Weight decay is decoupled: `w <- w (1 - lr wd)` before the Adam
    /// direction is applied.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::param(format!("learning rate {lr} must be >= 0")));
        }
        for (name, p) in params {
            let grad = p.grad_ref();
            let g = grad
                .as_ref()
                .ok_or_else(|| Error::param(format!("parameter `{name}` is not tracked")))?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.state.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let (b1, b2, eps_t) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        let decay = T::lit(1.0 - lr * weight_decay);
        let lr_t = T::lit(lr);
        for (name, p) in params {
            let shape = p.shape();
            let entry = self
                .state
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments {
                    m: Array::zeros(shape.clone()),
                    v: Array::zeros(shape.clone()),
                    step: 0,
                });
            if entry.m.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: entry.m.shape().to_vec(),
                    rhs: shape,
                });
            }
            entry.step += 1;
            let c1 = T::lit(1.0 - beta1.powi(entry.step as i32));
            let c2 = T::lit(1.0 - beta2.powi(entry.step as i32));
            let grad = p.grad_ref();
            let g = grad.as_ref().expect("checked above").data();
            let (m, v) = (entry.m.data_mut(), entry.v.data_mut());
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            }
            let (m, v) = (entry.m.data(), entry.v.data());
            drop(grad);
            p.update(|w| {
                for i in 0..w.len() {
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    w[i] = w[i] * decay - lr_t * mhat / (vhat.sqrt() + eps_t);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}
