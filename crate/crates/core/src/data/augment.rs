use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fps_resample, PointCloud};

/// Stages run in field order; each is skipped when disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    /// Uniform scale factor range `[lo, hi]`.
    pub scale: Option<[f64; 2]>,
    /// Each axis is scaled by a factor drawn from `[1 - f, 1 + f]`; 0 disables.
    pub anisotropic: f64,
    pub rotate_gravity: bool,
    /// Center on the centroid and rescale to unit max norm.
    pub unit_sphere: bool,
    pub gravity_axis: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            scale: None,
            anisotropic: 0.0,
            rotate_gravity: false,
            unit_sphere: false,
            gravity_axis: 2,
        }
    }

    pub fn pretrain() -> Self {
        Self {
            scale: Some([0.8, 1.2]),
            rotate_gravity: true,
            ..Self::none()
        }
    }

    pub fn finetune() -> Self {
        Self {
            anisotropic: 0.4,
            unit_sphere: true,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some([lo, hi]) = self.scale {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::param(format!(
                    "scale range [{lo}, {hi}] needs 0 < lo <= hi"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.anisotropic) {
            return Err(Error::param(format!(
                "anisotropic fraction {} outside [0, 1)",
                self.anisotropic
            )));
        }
        if self.gravity_axis > 2 {
            return Err(Error::param(format!(
                "gravity axis {} is not 0, 1 or 2",
                self.gravity_axis
            )));
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<PointCloud> {
    spec.validate()?;
    let mut pts: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    if let Some([lo, hi]) = spec.scale {
        let s = if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        pts.iter_mut().flatten().for_each(|c| *c *= s);
    }
    if spec.anisotropic > 0.0 {
        let f = spec.anisotropic;
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0 - f..=1.0 + f));
        for p in &mut pts {
            for a in 0..3 {
                p[a] *= s[a];
            }
        }
    }
    if spec.rotate_gravity {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = angle.sin_cos();
        let g = spec.gravity_axis;
        let (u, v) = ((g + 1) % 3, (g + 2) % 3);
        for p in &mut pts {
            let (pu, pv) = (p[u], p[v]);
            p[u] = cos * pu - sin * pv;
            p[v] = sin * pu + cos * pv;
        }
    }
    if spec.unit_sphere {
        let n = pts.len() as f64;
        let mut c = [0.0; 3];
        for p in &pts {
            for a in 0..3 {
                c[a] += p[a] / n;
            }
        }
        for p in &mut pts {
            for a in 0..3 {
                p[a] -= c[a];
            }
        }
        let max = pts
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        if max > 0.0 {
            pts.iter_mut().flatten().for_each(|c| *c /= max);
        }
    }
    let out = pts
        .iter()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();
    PointCloud::with_labels(out, cloud.labels.clone())
}

/// Resamples to `count` points by FPS, then applies `spec`.
pub fn make_pretrain_sample<R: Rng + ?Sized>(
    cloud: &PointCloud,
    count: usize,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<PointCloud> {
    if cloud.len() < count {
        return Err(Error::param(format!(
            "cannot resample {count} points from a cloud of {}",
            cloud.len()
        )));
    }
    let sub = fps_resample(cloud, count, rng.random())?;
    augment(&sub, spec, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-3.0f32..3.0)))
            .collect();
        PointCloud::with_labels(pts, Some((0..n as u32).collect())).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let c = random_cloud(50, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&c, &AugmentationSpec::none(), &mut rng).unwrap(), c);
    }

    #[test]
    fn unit_sphere_normalization() {
        let c = random_cloud(200, 2);
        let spec = AugmentationSpec {
            unit_sphere: true,
            ..AugmentationSpec::none()
        };
        let out = augment(&c, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = out.len() as f64;
        let mut centroid = [0.0f64; 3];
        let mut max = 0.0f64;
        for p in &out.points {
            for a in 0..3 {
                centroid[a] += p[a] as f64 / n;
            }
            max = max.max(p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt());
        }
        assert!(centroid.iter().map(|c| c * c).sum::<f64>().sqrt() < 1e-6);
        assert!((max - 1.0).abs() < 1e-6);
        assert_eq!(out.labels, c.labels);
    }

    #[test]
    fn gravity_rotation_keeps_height() {
        let c = random_cloud(100, 3);
        let spec = AugmentationSpec {
            rotate_gravity: true,
            ..AugmentationSpec::none()
        };
        let out = augment(&c, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (a, b) in out.points.iter().zip(&c.points) {
            assert_eq!(a[2], b[2]);
            let ra = (a[0] as f64).hypot(a[1] as f64);
            let rb = (b[0] as f64).hypot(b[1] as f64);
            assert!((ra - rb).abs() < 1e-5);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let c = random_cloud(5, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [
            AugmentationSpec {
                scale: Some([0.0, 1.0]),
                ..AugmentationSpec::none()
            },
            AugmentationSpec {
                scale: Some([1.2, 0.8]),
                ..AugmentationSpec::none()
            },
            AugmentationSpec {
                anisotropic: 1.0,
                ..AugmentationSpec::none()
            },
            AugmentationSpec {
                gravity_axis: 3,
                ..AugmentationSpec::none()
            },
        ] {
            assert!(augment(&c, &spec, &mut rng).is_err());
        }
    }

    #[test]
    fn pretrain_sample_is_subset_and_deterministic() {
        let c = random_cloud(300, 5);
        let none = AugmentationSpec::none();
        let a = make_pretrain_sample(&c, 64, &none, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_pretrain_sample(&c, 64, &none, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.points.iter().all(|p| c.points.contains(p)));
        assert!(make_pretrain_sample(&c, 301, &none, &mut ChaCha8Rng::seed_from_u64(7)).is_err());
    }
}
