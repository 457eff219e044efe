//! Finite-difference gradient checks over every differentiable piece of
//! the pipeline, from single tensor ops up to a full pretraining loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Attention, Block, Encoder, EncoderConfig, ForwardCtx};
use crate::downstream::{mean_max_pool, partseg_forward, HiddenLayer, MlpHead, PartSegHead};
use crate::embedding::{MiniPointNet, PointNetDims, PositionalEncoder};
use crate::error::Result;
use crate::geometry::{
    feature_propagation, fps_from, knn_group, sq_dist, Point, PointCloud, Propagation,
};
use crate::numerics::gradcheck::{check_all_ops, check_fn, check_module, GradCheck};
use crate::numerics::{Array, Tensor};
use crate::pretraining::{toy_gradient_check, Mode};

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array<f64> {
    Array::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [0; 3].map(|_: u8| rng.random_range(-1.0f32..1.0)))
        .collect()
}

/// Larger weights than the default init so every path carries signal.
fn widen<M: crate::numerics::Module<f64>>(m: &M, rng: &mut ChaCha8Rng) -> M {
    m.map_params(&mut |t| {
        let mut a = t.to_array();
        for x in a.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        Tensor::param(a)
    })
}

/// Embedding, backbone and head layers, plus the end-to-end pretraining
/// loss in both modes.
pub fn module_gradient_checks() -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r = &mut rng;
    let mut out = Vec::new();

    let cfg = EncoderConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        ..EncoderConfig::default()
    };
    let x = Tensor::constant(rand_array(r, &[2, 5, 8], 1.0));
    let pos = Tensor::constant(rand_array(r, &[2, 5, 8], 1.0));

    let pointnet = widen(
        &MiniPointNet::<f64>::new(
            PointNetDims {
                first: [6, 5],
                second: [7, 4],
            },
            r,
        ),
        r,
    );
    let patches = Tensor::constant(rand_array(r, &[3, 6, 3], 0.3));
    out.push(check_module("mini_pointnet", &pointnet, |m| {
        m.forward(&patches)
    })?);

    let pe = widen(&PositionalEncoder::<f64>::new(6, 8, r), r);
    let centers = Tensor::constant(rand_array(r, &[2, 5, 3], 1.0));
    out.push(check_module("positional_encoder", &pe, |m| {
        m.forward(&centers)
    })?);

    let attn = widen(&Attention::<f64>::new(8, 2, true, r), r);
    out.push(check_module("attention", &attn, |m| {
        m.forward(&x, &cfg, &mut ForwardCtx::eval())
    })?);
    out.push(check_fn("attention_input", &[x.to_array()], |t| {
        attn.forward(&t[0], &cfg, &mut ForwardCtx::eval())
    })?);

    let block = widen(&Block::<f64>::new(&cfg, r), r);
    out.push(check_module("block", &block, |m| {
        m.forward(&x, &cfg, 0.0, &mut ForwardCtx::eval())
    })?);

    let encoder = widen(&Encoder::<f64>::new(cfg, r)?, r);
    out.push(check_module("encoder", &encoder, |m| {
        let l = m.forward(&x, &pos, &mut ForwardCtx::eval())?;
        m.norm.forward(&l.average_blocks(&[1, 2])?)
    })?);
    out.push(check_fn(
        "encoder_inputs",
        &[x.to_array(), pos.to_array()],
        |t| {
            Ok(encoder
                .forward(&t[0], &t[1], &mut ForwardCtx::eval())?
                .last()
                .clone())
        },
    )?);

    let hidden = widen(&HiddenLayer::<f64>::new(8, 6, r), r);
    out.push(check_module("hidden_layer", &hidden, |m| m.forward(&x))?);
    let head = widen(&MlpHead::<f64>::new(16, &[6, 5], 3, 0.5, r)?, r);
    out.push(check_module("mlp_head_pooled", &head, |m| {
        m.forward(&mean_max_pool(&x)?, &mut ForwardCtx::eval())
    })?);

    let sources = rand_points(r, 5);
    let queries = rand_points(r, 16);
    let feats = rand_array(r, &[5, 8], 1.0);
    out.push(check_fn("feature_propagation", &[feats], |t| {
        feature_propagation(&queries, &sources, &t[0], Propagation::default())
    })?);

    // 16-point toy segmentation head
    let seg = widen(&PartSegHead::<f64>::new(8, 6, &[7], 2, 3, 0.5, r)?, r);
    let src: Vec<Vec<Point>> = (0..2).map(|_| rand_points(r, 5)).collect();
    let pts: Vec<Vec<Point>> = (0..2).map(|_| rand_points(r, 16)).collect();
    let src_refs: Vec<&[Point]> = src.iter().map(Vec::as_slice).collect();
    let pt_refs: Vec<&[Point]> = pts.iter().map(Vec::as_slice).collect();
    out.push(check_module("partseg_head", &seg, |m| {
        partseg_forward(&x, &src_refs, &pt_refs, &[1, 0], m, &mut ForwardCtx::eval())
    })?);
    out.push(check_fn("partseg_tokens", &[x.to_array()], |t| {
        partseg_forward(
            &t[0],
            &src_refs,
            &pt_refs,
            &[1, 0],
            &seg,
            &mut ForwardCtx::eval(),
        )
    })?);

    out.push(toy_gradient_check(Mode::Point2vec, 3)?);
    out.push(toy_gradient_check(Mode::Data2vecPc, 3)?);
    Ok(out)
}

/// Every check: tensor ops, layers, and the pretraining loss.
pub fn gradient_suite() -> Result<Vec<GradCheck>> {
    let mut all = check_all_ops()?;
    all.extend(module_gradient_checks()?);
    Ok(all)
}

/// Exhaustive greedy FPS: every round rescans the full selected set for each
/// candidate. Ties go to the lowest index.
pub fn fps_oracle(points: &[Point], n: usize, first: usize) -> Vec<usize> {
    let mut selected = vec![first];
    while selected.len() < n {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected
                .iter()
                .map(|&s| sq_dist(&points[i], &points[s]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(b, _)| d > b) {
                best = Some((d, i));
            }
        }
        selected.push(best.expect("n <= points").1);
    }
    selected
}

/// Full sort by (distance, index).
pub fn knn_oracle(points: &[Point], center: &Point, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (sq_dist(p, center), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(_, i)| i).collect()
}

/// Random cloud of up to `max_points` points. Every other cloud is snapped
/// to a coarse grid so that duplicate points and distance ties occur.
pub fn oracle_cloud(rng: &mut ChaCha8Rng, max_points: usize) -> Vec<Point> {
    let n = rng.random_range(1..=max_points);
    let grid = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            [0; 3].map(|_: u8| {
                let v = rng.random_range(-1.0f32..1.0);
                if grid {
                    (v * 2.0).round() / 2.0
                } else {
                    v
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleReport {
    pub clouds: usize,
    pub mismatches: usize,
}

/// FPS against [`fps_oracle`] on `clouds` random clouds of at most 128 points.
pub fn fps_oracle_trials(clouds: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..clouds {
        let pts = oracle_cloud(&mut rng, 128);
        let n = rng.random_range(1..=pts.len());
        let first = rng.random_range(0..pts.len());
        if fps_from(&pts, n, first) != fps_oracle(&pts, n, first) {
            mismatches += 1;
        }
    }
    OracleReport { clouds, mismatches }
}

/// k-NN grouping against [`knn_oracle`] on `clouds` random clouds of at most
/// 256 points, four query centers each (two of them cloud points).
pub fn knn_oracle_trials(clouds: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..clouds {
        let pts = oracle_cloud(&mut rng, 256);
        let k = rng.random_range(1..=pts.len());
        let mut centers = rand_points(&mut rng, 2);
        centers.push(pts[rng.random_range(0..pts.len())]);
        centers.push(pts[rng.random_range(0..pts.len())]);
        let got = knn_group(&PointCloud::new(pts.clone())?, &centers, k)?;
        let want: Vec<usize> = centers
            .iter()
            .flat_map(|c| knn_oracle(&pts, c, k))
            .collect();
        if got != want {
            mismatches += 1;
        }
    }
    Ok(OracleReport { clouds, mismatches })
}
