use point2vec::diagnostics::{fps_oracle, fps_oracle_trials, knn_oracle, knn_oracle_trials};
use point2vec::geometry::{fps_from, knn_group, sq_dist, tokenize, Point, PointCloud};
use point2vec::pretraining::{generate_mask, mask_count, mask_coverage, MaskStrategy};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn coord() -> impl Strategy<Value = f32> {
    prop_oneof![-4i8..=4i8]
        .prop_map(|v| v as f32 / 4.0)
        .boxed()
        .prop_union((-1.0f32..1.0).boxed())
}

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec([coord(), coord(), coord()], 1..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fps_equals_greedy_oracle(pts in points(128), n_frac in 0.0f64..1.0, first_frac in 0.0f64..1.0) {
        let n = 1 + (n_frac * (pts.len() - 1) as f64) as usize;
        let first = (first_frac * pts.len() as f64) as usize % pts.len();
        let got = fps_from(&pts, n, first);
        prop_assert_eq!(&got, &fps_oracle(&pts, n, first));
        let mut uniq = got.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n);
    }

    #[test]
    fn knn_equals_sort_oracle(pts in points(256), k_frac in 0.0f64..1.0, c in [coord(), coord(), coord()]) {
        let k = 1 + (k_frac * (pts.len() - 1) as f64) as usize;
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let got = knn_group(&cloud, &[c, pts[0]], k).unwrap();
        let want: Vec<usize> = [c, pts[0]].iter().flat_map(|c| knn_oracle(&pts, c, k)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn patches_hold_their_nearest_points(pts in points(96), seed in any::<u64>()) {
        prop_assume!(pts.len() >= 8);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let set = tokenize(&cloud, 4, 8, seed).unwrap();
        for (i, c) in set.centers.iter().enumerate() {
            let g = set.group(i);
            let far = sq_dist(&pts[g[7]], c);
            for (j, p) in pts.iter().enumerate() {
                if !g.contains(&j) {
                    prop_assert!(sq_dist(p, c) >= far);
                }
            }
            for (j, &gi) in g.iter().enumerate() {
                for a in 0..3 {
                    prop_assert_eq!(set.normalized[(i * 8 + j) * 3 + a], pts[gi][a] as f64 - c[a] as f64);
                }
            }
        }
    }

    #[test]
    fn mask_count_follows_rounding(n in 2usize..200, ratio in 0.01f64..0.99) {
        let m = mask_count(n, ratio).unwrap();
        prop_assert!(m >= 1 && m < n);
        if (1.0..=(n - 1) as f64).contains(&(ratio * n as f64).round()) {
            prop_assert_eq!(m as f64, (ratio * n as f64).round());
        }
    }

    #[test]
    fn coverage_partitions_points(pts in points(200), seed in any::<u64>(), ratio in 0.05f64..0.95, block in any::<bool>()) {
        prop_assume!(pts.len() >= 32);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let set = tokenize(&cloud, 8, 6, seed).unwrap();
        let strategy = if block { MaskStrategy::Block } else { MaskStrategy::Random };
        let layout = generate_mask(&set.centers, strategy, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cov = mask_coverage(pts.len(), &set.group_indices, 6, &layout).unwrap();
        let mut covered = vec![false; pts.len()];
        for &g in &set.group_indices {
            covered[g] = true;
        }
        prop_assert_eq!(cov.covered(), covered.iter().filter(|&&c| c).count());
        prop_assert_eq!(cov.covered() + cov.uncovered, pts.len());
    }
}

#[test]
fn thousand_cloud_oracles() {
    let fps = fps_oracle_trials(1000, 11);
    let knn = knn_oracle_trials(1000, 12).unwrap();
    assert_eq!(fps.mismatches, 0);
    assert_eq!(knn.mismatches, 0);
}

#[test]
fn default_ratio_masks_42_of_64() {
    let cloud = PointCloud::new(
        (0..256)
            .map(|i| [(i % 16) as f32, (i / 16) as f32, 0.0])
            .collect(),
    )
    .unwrap();
    let set = tokenize(&cloud, 64, 4, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for strategy in [MaskStrategy::Random, MaskStrategy::Block] {
        assert_eq!(
            generate_mask(&set.centers, strategy, 0.65, &mut rng)
                .unwrap()
                .masked_count(),
            42
        );
    }
}
