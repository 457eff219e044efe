//! Fixtures shared by the benchmarks.

use point2vec::data::{generate_synthetic_shape, random_primitive, SyntheticShapeSpec};
use point2vec::geometry::tokenize;
use point2vec::{PatchSet, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn shape(points: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_synthetic_shape(&SyntheticShapeSpec {
        primitive: random_primitive(seed as usize % 5, &mut rng),
        noise: 0.01,
        points,
        seed: rng.random(),
    })
    .expect("valid shape spec")
}

pub fn patch_batch(batch: usize, points: usize, n: usize, k: usize) -> Vec<PatchSet> {
    (0..batch as u64)
        .map(|i| tokenize(&shape(points, i), n, k, i).expect("valid tokenization"))
        .collect()
}
