//! Uniform surface samples of simple primitives, the desk-scale stand-in
//! for mesh datasets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// All primitives are centered at the origin with `z` as their axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere { radius: f64 },
    Cube { side: f64 },
    Cylinder { radius: f64, height: f64 },
    Cone { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
}

impl Primitive {
    pub const NAMES: [&'static str; 5] = ["sphere", "cube", "cylinder", "cone", "torus"];

    pub fn name(&self) -> &'static str {
        Self::NAMES[self.class_index()]
    }

    pub fn class_index(&self) -> usize {
        match self {
            Primitive::Sphere { .. } => 0,
            Primitive::Cube { .. } => 1,
            Primitive::Cylinder { .. } => 2,
            Primitive::Cone { .. } => 3,
            Primitive::Torus { .. } => 4,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims: &[f64] = match self {
            Primitive::Sphere { radius } => &[*radius],
            Primitive::Cube { side } => &[*side],
            Primitive::Cylinder { radius, height } | Primitive::Cone { radius, height } => {
                &[*radius, *height]
            }
            Primitive::Torus { major, minor } => {
                if minor >= major {
                    return Err(Error::param(
                        "torus minor radius must be below its major radius",
                    ));
                }
                &[*major, *minor]
            }
        };
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::param(format!(
                "{} sizes must be positive: {dims:?}",
                self.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticShapeSpec {
    pub primitive: Primitive,
    /// Standard deviation of the offset along the surface normal.
    pub noise: f64,
    pub points: usize,
    pub seed: u64,
}

pub fn generate_synthetic_shape(spec: &SyntheticShapeSpec) -> Result<PointCloud> {
    spec.primitive.validate()?;
    if spec.points == 0 {
        return Err(Error::param("synthetic shape needs at least one point"));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::param(format!(
            "noise {} must be non-negative",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = (0..spec.points)
        .map(|_| {
            let (p, n) = sample_surface(&spec.primitive, &mut rng);
            let off = if spec.noise > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                spec.noise * z
            } else {
                0.0
            };
            [
                (p[0] + off * n[0]) as f32,
                (p[1] + off * n[1]) as f32,
                (p[2] + off * n[2]) as f32,
            ]
        })
        .collect();
    PointCloud::new(points)
}

type V3 = [f64; 3];

/// A surface point and its outward unit normal.
fn sample_surface(prim: &Primitive, rng: &mut ChaCha8Rng) -> (V3, V3) {
    match *prim {
        Primitive::Sphere { radius } => {
            let n = loop {
                let v: V3 = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 1e-12 {
                    break [v[0] / len, v[1] / len, v[2] / len];
                }
            };
            ([n[0] * radius, n[1] * radius, n[2] * radius], n)
        }
        Primitive::Cube { side } => {
            let h = side / 2.0;
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            let mut n = [0.0; 3];
            for (a, c) in p.iter_mut().enumerate() {
                *c = if a == axis {
                    sign * h
                } else {
                    rng.random_range(-h..=h)
                };
            }
            n[axis] = sign;
            (p, n)
        }
        Primitive::Cylinder { radius, height } => {
            let side = 2.0 * PI * radius * height;
            let caps = 2.0 * PI * radius * radius;
            let theta = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + caps) < side {
                let z = rng.random_range(-height / 2.0..=height / 2.0);
                (
                    [radius * theta.cos(), radius * theta.sin(), z],
                    [theta.cos(), theta.sin(), 0.0],
                )
            } else {
                let z = if rng.random_bool(0.5) {
                    height / 2.0
                } else {
                    -height / 2.0
                };
                disc(radius, theta, rng, z)
            }
        }
        Primitive::Cone { radius, height } => {
            let slant = (radius * radius + height * height).sqrt();
            let side = PI * radius * slant;
            let base = PI * radius * radius;
            let theta = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + base) < side {
                // area grows linearly with distance from the apex
                let t = rng.random_range(0.0f64..=1.0).sqrt();
                let rho = radius * t;
                (
                    [
                        rho * theta.cos(),
                        rho * theta.sin(),
                        height / 2.0 - height * t,
                    ],
                    [
                        height * theta.cos() / slant,
                        height * theta.sin() / slant,
                        radius / slant,
                    ],
                )
            } else {
                disc(radius, theta, rng, -height / 2.0)
            }
        }
        Primitive::Torus { major, minor } => {
            // rejection on the tube angle keeps the area density uniform
            let phi = loop {
                let phi = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..major + minor) <= major + minor * phi.cos() {
                    break phi;
                }
            };
            let theta = rng.random_range(0.0..2.0 * PI);
            let n = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
            let ring = major + minor * phi.cos();
            (
                [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()],
                n,
            )
        }
    }
}

fn disc(radius: f64, theta: f64, rng: &mut ChaCha8Rng, z: f64) -> (V3, V3) {
    let r = radius * rng.random_range(0.0f64..=1.0).sqrt();
    (
        [r * theta.cos(), r * theta.sin(), z],
        [0.0, 0.0, z.signum()],
    )
}

/// Labels each point by which of `bands` equal-height slabs along `z` it
/// falls in, lowest slab first.
pub fn height_bands(points: &[Point], bands: u32) -> Result<Vec<u32>> {
    if bands == 0 {
        return Err(Error::param("need at least one band"));
    }
    let (lo, hi) = points
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[2]), hi.max(p[2]))
        });
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    Ok(points
        .iter()
        .map(|p| (((p[2] - lo) / span * bands as f32) as u32).min(bands - 1))
        .collect())
}

/// Randomized five-class shape; sizes vary so the class is not readable
/// from scale alone.
pub fn random_primitive(class: usize, rng: &mut impl Rng) -> Primitive {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match class % 5 {
        0 => Primitive::Sphere {
            radius: u(0.6, 1.0),
        },
        1 => Primitive::Cube { side: u(1.0, 1.6) },
        2 => Primitive::Cylinder {
            radius: u(0.4, 0.8),
            height: u(0.9, 1.8),
        },
        3 => Primitive::Cone {
            radius: u(0.5, 0.9),
            height: u(0.9, 1.8),
        },
        _ => {
            let major = u(0.6, 0.9);
            Primitive::Torus {
                major,
                minor: u(0.15, 0.35).min(0.6 * major),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(primitive: Primitive, noise: f64, points: usize) -> SyntheticShapeSpec {
        SyntheticShapeSpec {
            primitive,
            noise,
            points,
            seed: 3,
        }
    }

    fn norm(p: &Point) -> f64 {
        p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn unit_sphere_on_surface() {
        let c =
            generate_synthetic_shape(&spec(Primitive::Sphere { radius: 1.0 }, 0.0, 2000)).unwrap();
        assert!(c.points.iter().all(|p| (norm(p) - 1.0).abs() < 1e-6));
    }

    #[test]
    fn cube_points_on_faces() {
        let c = generate_synthetic_shape(&spec(Primitive::Cube { side: 2.0 }, 0.0, 2000)).unwrap();
        for p in &c.points {
            let m = p.iter().fold(0.0f32, |m, c| m.max(c.abs()));
            assert!((m - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_sphere_mean_radius() {
        let (sigma, n) = (0.05, 8192);
        let c =
            generate_synthetic_shape(&spec(Primitive::Sphere { radius: 1.0 }, sigma, n)).unwrap();
        let mean = c.points.iter().map(norm).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn surfaces_are_exact_without_noise() {
        let c = generate_synthetic_shape(&spec(
            Primitive::Torus {
                major: 1.0,
                minor: 0.3,
            },
            0.0,
            500,
        ))
        .unwrap();
        for p in &c.points {
            let ring = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt() - 1.0;
            assert!((ring.hypot(p[2] as f64) - 0.3).abs() < 1e-6);
        }
        let c = generate_synthetic_shape(&spec(
            Primitive::Cone {
                radius: 1.0,
                height: 2.0,
            },
            0.0,
            500,
        ))
        .unwrap();
        for p in &c.points {
            let rho = (p[0] as f64).hypot(p[1] as f64);
            let on_base = (p[2] + 1.0).abs() < 1e-6 && rho <= 1.0 + 1e-6;
            let on_side = (rho - (1.0 - p[2] as f64) / 2.0).abs() < 1e-6;
            assert!(on_base || on_side, "{p:?}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let s = spec(
            Primitive::Cylinder {
                radius: 0.5,
                height: 1.0,
            },
            0.01,
            300,
        );
        assert_eq!(
            generate_synthetic_shape(&s).unwrap(),
            generate_synthetic_shape(&s).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(
            generate_synthetic_shape(&spec(Primitive::Sphere { radius: 1.0 }, 0.0, 0)).is_err()
        );
        assert!(
            generate_synthetic_shape(&spec(Primitive::Sphere { radius: 1.0 }, -1.0, 5)).is_err()
        );
        assert!(generate_synthetic_shape(&spec(
            Primitive::Torus {
                major: 0.3,
                minor: 0.5
            },
            0.0,
            5
        ))
        .is_err());
    }

    #[test]
    fn bands_split_height() {
        let pts: Vec<Point> = (0..9).map(|i| [0.0, 0.0, i as f32]).collect();
        assert_eq!(
            height_bands(&pts, 3).unwrap(),
            vec![0, 0, 0, 1, 1, 1, 2, 2, 2]
        );
    }
}
