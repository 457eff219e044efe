use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Module};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    /// Length of the linear warm-up, in epochs.
    pub warmup_epochs: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            tau_start: 0.9998,
            tau_end: 0.99999,
            warmup_epochs: 200,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, t) in [("tau_start", self.tau_start), ("tau_end", self.tau_end)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config {
                    key: format!("pretrain.ema.{k}"),
                    msg: format!("{t} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }
}

/// Linear from `tau_start` at step 0 to `tau_end` at `warmup_steps`, then flat.
pub fn ema_decay_at(step: u64, tau_start: f64, tau_end: f64, warmup_steps: u64) -> f64 {
    if step >= warmup_steps {
        return tau_end;
    }
    tau_start + (tau_end - tau_start) * step as f64 / warmup_steps as f64
}

/// `teacher <- tau * teacher + (1 - tau) * student`, parameter by parameter.
/// Arithmetic is done in f64 so each result is the correctly rounded blend.
pub fn ema_update<T: Element, M: Module<T>>(teacher: &M, student: &M, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::param(format!("EMA decay {tau} outside [0, 1]")));
    }
    let t = teacher.named_params("");
    let s = student.named_params("");
    if t.len() != s.len() {
        return Err(Error::param(format!(
            "teacher has {} parameters, student {}",
            t.len(),
            s.len()
        )));
    }
    for ((tn, tt), (sn, st)) in t.iter().zip(&s) {
        if tn != sn || tt.shape() != st.shape() {
            return Err(Error::Shape {
                op: "ema_update",
                lhs: tt.shape(),
                rhs: st.shape(),
            });
        }
        if tt.is_tracked() {
            return Err(Error::param(format!(
                "teacher parameter {tn} tracks gradients"
            )));
        }
        let sv = st.value();
        tt.update(|dst| {
            for (d, &x) in dst.iter_mut().zip(sv.data()) {
                *d = T::lit(tau * d.as_f64() + (1.0 - tau) * x.as_f64());
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Array, Linear, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let (a, b) = (0.9998, 0.99999);
        assert_eq!(ema_decay_at(0, a, b, 1000), 0.9998);
        assert_eq!(ema_decay_at(1000, a, b, 1000), 0.99999);
        assert_eq!(ema_decay_at(5000, a, b, 1000), 0.99999);
        assert!((ema_decay_at(500, a, b, 1000) - 0.999895).abs() < 1e-12);
        assert_eq!(ema_decay_at(0, a, b, 0), b);
    }

    fn filled(v: f64) -> Linear<f64> {
        let l = Linear::new(2, 2, true, &mut ChaCha8Rng::seed_from_u64(0));
        l.map_params(&mut |t| Tensor::constant(Array::full(t.shape(), v)))
    }

    #[test]
    fn blend_arithmetic() {
        let teacher = filled(1.0);
        ema_update(&teacher, &filled(0.0), 0.9).unwrap();
        assert!(teacher
            .weight
            .to_vec()
            .iter()
            .all(|&x| (x - 0.9).abs() < 1e-15));

        let teacher = filled(1.0);
        ema_update(&teacher, &filled(5.0), 1.0).unwrap();
        assert!(teacher.weight.to_vec().iter().all(|&x| x == 1.0));
        ema_update(&teacher, &filled(5.0), 0.0).unwrap();
        assert!(teacher.weight.to_vec().iter().all(|&x| x == 5.0));
    }

    #[test]
    fn mismatch_and_tracked_teacher_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Linear::<f64>::new(2, 3, true, &mut rng).detached_copy();
        let b = Linear::<f64>::new(3, 2, true, &mut rng);
        assert!(ema_update(&a, &b, 0.5).is_err());
        let c = Linear::<f64>::new(2, 3, true, &mut rng);
        assert!(ema_update(&c, &c.tracked_copy(), 0.5).is_err());
    }
}
