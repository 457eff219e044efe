use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Uniform subset of tokens.
    Random,
    /// A seed token and its nearest neighbors in center space.
    Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayout {
    /// `true` marks a masked token.
    pub mask: Vec<bool>,
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

impl MaskLayout {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// `round(ratio * n)` clamped to `[1, n - 1]`.
pub fn mask_count(n: usize, ratio: f64) -> Result<usize> {
    if n < 2 {
        return Err(Error::param(format!(
            "masking needs at least 2 tokens, got {n}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param(format!("mask ratio {ratio} outside (0, 1)")));
    }
    Ok(((ratio * n as f64).round() as usize).clamp(1, n - 1))
}

pub fn generate_mask<R: Rng + ?Sized>(
    centers: &[Point],
    strategy: MaskStrategy,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskLayout> {
    let n = centers.len();
    let m = mask_count(n, ratio)?;
    let mut mask = vec![false; n];
    match strategy {
        MaskStrategy::Random => {
            for i in sample(rng, n, m) {
                mask[i] = true;
            }
        }
        MaskStrategy::Block => {
            let seed = rng.random_range(0..n);
            let c = centers[seed];
            let mut order: Vec<(f64, usize)> = centers
                .iter()
                .enumerate()
                .map(|(i, p)| (sq_dist(p, &c), i))
                .collect();
            // the seed sorts first at distance 0 unless a duplicate center precedes it
            order.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then((a.1 != seed).cmp(&(b.1 != seed)))
                    .then(a.1.cmp(&b.1))
            });
            for &(_, i) in &order[..m] {
                mask[i] = true;
            }
        }
    }
    Ok(MaskLayout {
        mask,
        strategy,
        ratio,
    })
}

/// How the points of one cloud fall under masked and visible patches.
/// Points outside every patch count as uncovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskCoverage {
    pub points: usize,
    pub masked_only: usize,
    pub visible_only: usize,
    pub both: usize,
    pub uncovered: usize,
}

impl MaskCoverage {
    pub fn covered(&self) -> usize {
        self.masked_only + self.visible_only + self.both
    }

    /// Fraction of all input points in the given count.
    pub fn fraction(&self, count: usize) -> f64 {
        count as f64 / self.points as f64
    }

    pub fn merge(&mut self, other: &MaskCoverage) {
        self.points += other.points;
        self.masked_only += other.masked_only;
        self.visible_only += other.visible_only;
        self.both += other.both;
        self.uncovered += other.uncovered;
    }
}

/// Tags each point by the patches containing it; `groups` is the flat
/// `n * k` neighbor index list of a tokenization.
pub fn point_tags(
    points: usize,
    groups: &[usize],
    k: usize,
    layout: &MaskLayout,
) -> Result<Vec<(bool, bool)>> {
    if groups.len() != layout.len() * k {
        return Err(Error::param(format!(
            "{} group indices for {} tokens of {k} points",
            groups.len(),
            layout.len()
        )));
    }
    let mut tags = vec![(false, false); points];
    for (i, group) in groups.chunks(k).enumerate() {
        for &g in group {
            let t = tags.get_mut(g).ok_or_else(|| {
                Error::param(format!(
                    "group index {g} outside a cloud of {points} points"
                ))
            })?;
            if layout.mask[i] {
                t.0 = true;
            } else {
                t.1 = true;
            }
        }
    }
    Ok(tags)
}

pub fn mask_coverage(
    points: usize,
    groups: &[usize],
    k: usize,
    layout: &MaskLayout,
) -> Result<MaskCoverage> {
    let mut c = MaskCoverage {
        points,
        ..MaskCoverage::default()
    };
    for tag in point_tags(points, groups, k, layout)? {
        match tag {
            (true, false) => c.masked_only += 1,
            (false, true) => c.visible_only += 1,
            (true, true) => c.both += 1,
            (false, false) => c.uncovered += 1,
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Vec<Point> {
        (0..n).map(|i| [i as f32, 0.0, 0.0]).collect()
    }

    #[test]
    fn default_ratio_count() {
        assert_eq!(mask_count(64, 0.65).unwrap(), 42);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = generate_mask(&line(64), MaskStrategy::Random, 0.65, &mut rng).unwrap();
        assert_eq!(l.masked_count(), 42);
    }

    #[test]
    fn clamps_at_both_ends() {
        assert_eq!(mask_count(64, 1e-9).unwrap(), 1);
        assert_eq!(mask_count(64, 1.0 - 1e-9).unwrap(), 63);
        assert_eq!(mask_count(2, 0.5).unwrap(), 1);
        assert!(mask_count(1, 0.5).is_err());
        assert!(mask_count(10, 0.0).is_err());
        assert!(mask_count(10, 1.0).is_err());
    }

    #[test]
    fn block_mask_on_a_line_is_contiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let l = generate_mask(&line(20), MaskStrategy::Block, 0.3, &mut rng).unwrap();
            let idx = l.masked();
            assert_eq!(idx.len(), 6);
            assert!(idx.windows(2).all(|w| w[1] == w[0] + 1), "{idx:?}");
        }
    }

    #[test]
    fn visible_and_masked_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = generate_mask(&line(10), MaskStrategy::Random, 0.4, &mut rng).unwrap();
        let mut all = l.masked();
        all.extend(l.visible());
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn coverage_counts_each_point_once() {
        // two patches sharing point 1, point 3 in neither
        let layout = MaskLayout {
            mask: vec![true, false],
            strategy: MaskStrategy::Random,
            ratio: 0.5,
        };
        let c = mask_coverage(4, &[0, 1, 1, 2], 2, &layout).unwrap();
        assert_eq!(
            (c.masked_only, c.visible_only, c.both, c.uncovered),
            (1, 1, 1, 1)
        );
        assert_eq!(c.covered(), 3);
        assert!(mask_coverage(4, &[0, 1, 1], 2, &layout).is_err());
        assert!(mask_coverage(2, &[0, 1, 1, 2], 2, &layout).is_err());
    }
}
