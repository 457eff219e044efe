//! Point-cloud kernels: farthest point sampling, k-nearest-neighbor
//! grouping, patch normalization, and inverse-distance feature propagation.
//!
//! Everything here is brute force. Distances are squared Euclidean in f64
//! over f32 coordinates; ties always go to the lower index, which keeps the
//! results reproducible and lets tests compare against exhaustive oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{is_strict, Array, Element, Tensor};

pub type Point = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Optional per-point part labels.
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_labels(points, None)
    }

    pub fn with_labels(points: Vec<Point>, labels: Option<Vec<u32>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::param("point cloud needs at least one point"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::param(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud at `indices`, labels carried along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min subset starting from a seeded uniform first index.
pub fn farthest_point_sampling(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    check_count("farthest point sampling", n, cloud.len())?;
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    Ok(fps_from(&cloud.points, n, first))
}

/// FPS with an explicit first index. Requires `1 <= n <= points.len()`.
pub fn fps_from(points: &[Point], n: usize, first: usize) -> Vec<usize> {
    let coords: Vec<[f64; 3]> = points.iter().map(|p| p.map(f64::from)).collect();
    // selected points sit at -inf, so they neither shrink nor win
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut selected = Vec::with_capacity(n);
    let mut current = first;
    for _ in 0..n {
        selected.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let c = coords[current];
        let mut best = f64::NEG_INFINITY;
        let mut best_i = current;
        for (i, (p, d)) in coords.iter().zip(min_d.iter_mut()).enumerate() {
            let (dx, dy, dz) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
            let dc = dx * dx + dy * dy + dz * dz;
            if dc < *d {
                *d = dc;
            }
            if *d > best {
                best = *d;
                best_i = i;
            }
        }
        current = best_i;
    }
    selected
}

/// Indices of the `k` nearest cloud points to each center, nearest first.
/// Returned flat, `centers.len() * k` long.
pub fn knn_group(cloud: &PointCloud, centers: &[Point], k: usize) -> Result<Vec<usize>> {
    check_count("k-NN grouping", k, cloud.len())?;
    let mut out = Vec::with_capacity(centers.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(cloud.len());
    for c in centers {
        nearest_into(&cloud.points, c, k, &mut scratch);
        out.extend(scratch[..k].iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// Leaves the `k` smallest `(distance, index)` pairs, sorted, at the front
/// of `scratch`.
fn nearest_into(points: &[Point], c: &Point, k: usize, scratch: &mut Vec<(f64, usize)>) {
    scratch.clear();
    scratch.extend(points.iter().enumerate().map(|(i, p)| (sq_dist(p, c), i)));
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, cmp);
    }
    scratch[..k].sort_unstable_by(cmp);
}

/// Patch points expressed relative to their centers, flat `n * k * 3`.
pub fn normalize_patches(
    cloud: &PointCloud,
    centers: &[Point],
    group_indices: &[usize],
    k: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(group_indices.len() * 3);
    for (i, c) in centers.iter().enumerate() {
        for &g in &group_indices[i * k..(i + 1) * k] {
            let p = cloud.points[g];
            for a in 0..3 {
                out.push(p[a] as f64 - c[a] as f64);
            }
        }
    }
    out
}

/// Tokenization of one cloud into `n` patches of `k` points.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub center_indices: Vec<usize>,
    pub centers: Vec<Point>,
    pub group_size: usize,
    /// `n * k` cloud indices, row `i` sorted by distance to center `i`.
    pub group_indices: Vec<usize>,
    /// `n * k * 3` offsets from the patch center.
    pub normalized: Vec<f64>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.group_indices[i * self.group_size..(i + 1) * self.group_size]
    }
}

pub fn tokenize(cloud: &PointCloud, n: usize, k: usize, seed: u64) -> Result<PatchSet> {
    let center_indices = farthest_point_sampling(cloud, n, seed)?;
    let centers: Vec<Point> = center_indices.iter().map(|&i| cloud.points[i]).collect();
    let group_indices = knn_group(cloud, &centers, k)?;
    let normalized = normalize_patches(cloud, &centers, &group_indices, k);
    Ok(PatchSet {
        center_indices,
        centers,
        group_size: k,
        group_indices,
        normalized,
    })
}

/// Tokenizes each cloud with its own seed. Runs on the rayon pool unless the
/// calling thread is in strict mode; output order always follows input order.
pub fn tokenize_batch(
    clouds: &[PointCloud],
    n: usize,
    k: usize,
    seeds: &[u64],
) -> Result<Vec<PatchSet>> {
    if clouds.len() != seeds.len() {
        return Err(Error::param("one tokenization seed per cloud required"));
    }
    if is_strict() {
        clouds
            .iter()
            .zip(seeds)
            .map(|(c, &s)| tokenize(c, n, k, s))
            .collect()
    } else {
        clouds
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(c, &s)| tokenize(c, n, k, s))
            .collect()
    }
}

/// FPS down to `count` points; labels follow their points.
pub fn fps_resample(cloud: &PointCloud, count: usize, seed: u64) -> Result<PointCloud> {
    let idx = farthest_point_sampling(cloud, count, seed)?;
    Ok(cloud.select(&idx))
}

fn check_count(what: &str, n: usize, total: usize) -> Result<()> {
    if n == 0 || n > total {
        return Err(Error::param(format!(
            "{what}: requested {n} from a cloud of {total} points"
        )));
    }
    Ok(())
}

/// Inverse-distance interpolation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Propagation {
    pub k: usize,
    pub power: f64,
    pub eps: f64,
}

impl Default for Propagation {
    fn default() -> Self {
        Self {
            k: 3,
            power: 2.0,
            eps: 1e-8,
        }
    }
}

/// Dense `M x n` interpolation matrix: row `q` holds the normalized weights
/// `1 / (d^power + eps)` of the `k` sources nearest to query `q`.
pub fn interpolation_weights<T: Element>(
    queries: &[Point],
    sources: &[Point],
    cfg: Propagation,
) -> Result<Array<T>> {
    if sources.is_empty() {
        return Err(Error::param(
            "feature propagation needs at least one source",
        ));
    }
    if cfg.k == 0 || cfg.k > sources.len() {
        return Err(Error::param(format!(
            "interpolation over {} of {} sources",
            cfg.k,
            sources.len()
        )));
    }
    let n = sources.len();
    let mut w = vec![T::zero(); queries.len() * n];
    let mut scratch = Vec::with_capacity(n);
    for (q, p) in queries.iter().enumerate() {
        nearest_into(sources, p, cfg.k, &mut scratch);
        let raw: Vec<f64> = scratch[..cfg.k]
            .iter()
            .map(|&(d2, _)| 1.0 / (d2.sqrt().powf(cfg.power) + cfg.eps))
            .collect();
        let total: f64 = raw.iter().sum();
        for (&(_, s), r) in scratch[..cfg.k].iter().zip(&raw) {
            w[q * n + s] = T::lit(r / total);
        }
    }
    Array::new(vec![queries.len(), n], w)
}

/// Interpolates `features` (`[n, E]`) from `sources` onto `queries`;
/// differentiable with respect to the features.
pub fn feature_propagation<T: Element>(
    queries: &[Point],
    sources: &[Point],
    features: &Tensor<T>,
    cfg: Propagation,
) -> Result<Tensor<T>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != sources.len() {
        return Err(Error::Shape {
            op: "feature_propagation",
            lhs: shape,
            rhs: vec![sources.len()],
        });
    }
    let w = interpolation_weights::<T>(queries, sources, cfg)?;
    Tensor::constant(w).matmul(features)
}
