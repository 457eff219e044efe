use point2vec::backbone::{EncoderConfig, ForwardCtx, LayerOutputs};
use point2vec::data::*;
use point2vec::downstream::*;
use point2vec::embedding::PointNetDims;
use point2vec::geometry::{tokenize, PatchSet, Point, PointCloud, Propagation};
use point2vec::model::{ModelConfig, PointEncoder};
use point2vec::numerics::{label_smoothing_cross_entropy, strict_mode, Array, Module, Tensor};
use point2vec::pretraining::{Mode, PretrainConfig, Pretrainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(depth: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth,
            dim: 16,
            heads: 2,
            ..EncoderConfig::default()
        },
        pointnet: PointNetDims {
            first: [16, 16],
            second: [16, 16],
        },
        pos_hidden: 16,
    }
}

fn encoder(depth: usize, seed: u64) -> PointEncoder<f64> {
    PointEncoder::new(small_model(depth), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn cloud(seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_synthetic_shape(&SyntheticShapeSpec {
        primitive: random_primitive(seed as usize % 5, &mut rng),
        noise: 0.01,
        points: 128,
        seed,
    })
    .unwrap()
}

fn permute_tokens(s: &PatchSet, perm: &[usize]) -> PatchSet {
    let k = s.group_size;
    PatchSet {
        center_indices: perm.iter().map(|&i| s.center_indices[i]).collect(),
        centers: perm.iter().map(|&i| s.centers[i]).collect(),
        group_size: k,
        group_indices: perm.iter().flat_map(|&i| s.group(i).to_vec()).collect(),
        normalized: perm
            .iter()
            .flat_map(|&i| s.normalized[i * k * 3..(i + 1) * k * 3].to_vec())
            .collect(),
    }
}

#[test]
fn single_token_pool_duplicates_it() {
    let t = Tensor::<f64>::from_f64(vec![1, 1, 3], &[1.0, -2.0, 0.5]).unwrap();
    assert_eq!(
        mean_max_pool(&t).unwrap().to_vec(),
        vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]
    );
}

#[test]
fn classifier_ignores_token_order() {
    let _strict = strict_mode();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Classifier::new(encoder(2, 1), &[8], 5, 0.5, &mut rng).unwrap();
    let set = tokenize(&cloud(1), 8, 8, 0).unwrap();
    let mut perm: Vec<usize> = (0..8).collect();
    perm.reverse();
    perm.swap(0, 5);
    let shuffled = permute_tokens(&set, &perm);
    let a = model
        .forward(&[set], EncoderGrad::Train, &mut ForwardCtx::eval())
        .unwrap();
    let b = model
        .forward(&[shuffled], EncoderGrad::Train, &mut ForwardCtx::eval())
        .unwrap();
    assert_eq!(a.shape(), vec![1, 5]);
    assert_eq!(a.to_vec(), b.to_vec());
    let p = a.softmax().unwrap().to_vec();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn label_smoothing_examples() {
    let logits = Tensor::<f64>::from_f64(vec![1, 2], &[3f64.ln(), 0.0]).unwrap();
    let got = label_smoothing_cross_entropy(&logits, &[0], 0.2)
        .unwrap()
        .item();
    let want = 0.8 * (4.0f64 / 3.0).ln() + 0.2 * 4f64.ln();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let plain = label_smoothing_cross_entropy(&logits, &[0], 0.0)
        .unwrap()
        .item();
    assert!((plain - (4.0f64 / 3.0).ln()).abs() < 1e-12);

    let uniform = Tensor::<f64>::from_f64(vec![2, 4], &[0.7; 8]).unwrap();
    for eps in [0.0, 0.2, 0.5] {
        let l = label_smoothing_cross_entropy(&uniform, &[1, 3], eps)
            .unwrap()
            .item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn partseg_point_at_center_takes_its_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centers: Vec<Point> = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ];
    let w = point2vec::geometry::interpolation_weights::<f64>(
        &centers[2..3],
        &centers,
        Propagation::default(),
    )
    .unwrap();
    assert!(w.data()[2] >= 1.0 - 1e-6);

    // identical block outputs average to themselves
    let t = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let layers = LayerOutputs {
        layers: vec![t.clone(); 12],
    };
    assert_eq!(
        layers.average_blocks(&PARTSEG_BLOCKS).unwrap().to_vec(),
        t.to_vec()
    );

    // shuffling query points permutes their logits
    let head = PartSegHead::<f64>::new(4, 5, &[6], 2, 3, 0.5, &mut rng).unwrap();
    let tokens = Tensor::constant(Array::from_fn(vec![1, 4, 4], |_| {
        rng.random_range(-1.0..1.0)
    }));
    let pts: Vec<Point> = (0..16)
        .map(|_| [0; 3].map(|_: u8| rng.random_range(-1.0f32..1.0)))
        .collect();
    let rev: Vec<Point> = pts.iter().rev().copied().collect();
    let run = |p: &[Point]| {
        partseg_forward(
            &tokens,
            &[&centers],
            &[p],
            &[1],
            &head,
            &mut ForwardCtx::eval(),
        )
        .unwrap()
        .to_vec()
    };
    let (a, b) = (run(&pts), run(&rev));
    for i in 0..16 {
        assert_eq!(a[i * 3..i * 3 + 3], b[(15 - i) * 3..(15 - i) * 3 + 3]);
    }
}

#[test]
fn segmenter_needs_twelve_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = PartSegHead::<f64>::new(16, 8, &[8], 1, 3, 0.5, &mut rng).unwrap();
    assert!(Segmenter::new(encoder(11, 3), head.clone()).is_err());
    assert!(Segmenter::new(encoder(12, 3), head).is_ok());
}

#[test]
fn fewshot_episodes_are_disjoint() {
    let labels: Vec<usize> = (0..10).flat_map(|c| vec![c; 45]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (way, shot, support, query) in [(5, 10, 50, 100), (10, 20, 200, 200)] {
        for _ in 0..100 {
            let ep = sample_fewshot_episode(&labels, way, shot, &mut rng).unwrap();
            assert_eq!((ep.support.len(), ep.query.len()), (support, query));
            let mut seen = std::collections::BTreeSet::new();
            for &(i, l) in ep.support.iter().chain(&ep.query) {
                assert!(seen.insert(i), "instance {i} reused");
                assert_eq!(labels[i], ep.classes[l]);
            }
        }
    }
}

#[test]
fn confusion_matches_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
    let preds: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
    let m = ConfusionMatrix::from_predictions(&preds, &labels, 3).unwrap();
    for t in 0..3 {
        for p in 0..3 {
            let n = labels
                .iter()
                .zip(&preds)
                .filter(|&(&l, &q)| l == t && q == p)
                .count() as u64;
            assert_eq!(m.counts[t][p], n);
        }
    }
    let correct = labels.iter().zip(&preds).filter(|(l, p)| l == p).count();
    assert!((m.accuracy() - correct as f64 / 300.0).abs() < 1e-15);
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
fn jacobi(a: &[f64], n: usize) -> Vec<f64> {
    let mut a = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn pca_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, e) = (40, 8);
    let scales = [3.0, 2.5, 2.0, 1.0, 0.7, 0.5, 0.2, 0.1];
    let feats = Array::from_fn(vec![n, e], |i| rng.random_range(-1.0..1.0) * scales[i % e]);
    let (_, cov) = covariance(&feats).unwrap();
    let oracle = jacobi(&cov, e);
    let top = top_eigenpairs(&cov, e, 3);
    let captured: f64 = top.iter().map(|p| p.0).sum();
    for (k, (lambda, v)) in top.iter().enumerate() {
        assert!(
            (lambda - oracle[k]).abs() < 1e-8 * oracle[0],
            "{lambda} vs {}",
            oracle[k]
        );
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // no other rank-3 projection captures more variance
    for _ in 0..200 {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 3 {
            let mut v: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(v.iter().map(|x| x / norm).collect());
        }
        let var: f64 = basis
            .iter()
            .map(|b| {
                (0..e)
                    .map(|i| (0..e).map(|j| b[i] * cov[i * e + j] * b[j]).sum::<f64>())
                    .sum::<f64>()
            })
            .sum();
        assert!(var <= captured + 1e-9);
    }
    let colors = pca_rgb(&feats).unwrap();
    assert!(colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
}

fn tiny_dataset(train_per_class: usize) -> Dataset {
    synthetic_dataset(&SyntheticDatasetSpec {
        train_per_class,
        test_per_class: 2,
        points: 128,
        seed: 7,
        ..SyntheticDatasetSpec::default()
    })
    .unwrap()
}

fn tiny_cls_config() -> ClassificationConfig {
    ClassificationConfig {
        epochs: 4,
        batch_size: 8,
        warmup_epochs: 1,
        freeze_epochs: 2,
        head_hidden: vec![8],
        points: 64,
        centers: 8,
        group_size: 8,
        ..ClassificationConfig::default()
    }
}

#[test]
fn frozen_encoder_stays_bit_identical() {
    let ds = tiny_dataset(4);
    let train = ds.split(Split::Train);
    let cfg = tiny_cls_config();
    let enc = PointEncoder::<f32>::new(small_model(2), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let mut tr = ClassificationTrainer::new(enc, 5, &cfg, true, train.len(), 8).unwrap();
    let snapshot = |t: &ClassificationTrainer<f32>| -> Vec<Vec<f32>> {
        t.model
            .encoder
            .named_params("")
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect()
    };
    let head_before = tr.model.head.named_params("")[0].1.to_vec();
    let before = snapshot(&tr);
    for _ in 0..2 {
        tr.train_epoch(&train).unwrap();
        assert_eq!(snapshot(&tr), before);
    }
    assert_ne!(tr.model.head.named_params("")[0].1.to_vec(), head_before);
    tr.train_epoch(&train).unwrap();
    assert_ne!(snapshot(&tr), before);
}

#[test]
fn scratch_recipe_trains_everything() {
    let cfg = tiny_cls_config();
    let r = cfg.recipe(false);
    assert_eq!(r.freeze_epochs, 0);
    assert_eq!(r.lr, cfg.scratch_lr);
    assert_eq!(cfg.recipe(true).lr, cfg.lr);
}

#[test]
fn pretrained_weights_load_across_modes() {
    for (mode, decoder) in [(Mode::Point2vec, true), (Mode::Data2vecPc, false)] {
        let cfg = PretrainConfig {
            mode,
            batch_size: Some(4),
            epochs: 1,
            warmup_epochs: 0,
            target_layers: 1,
            decoder_depth: decoder.then_some(1),
            ..PretrainConfig::default()
        };
        let pt = Pretrainer::<f32>::new(small_model(2), cfg, 4, 9).unwrap();
        let ckpt = pt.checkpoint().unwrap();
        let loaded = load_pretrained_encoder::<f32>(&ckpt, Some(&small_model(2))).unwrap();
        assert_eq!(loaded.mode, mode);
        assert_eq!(loaded.had_decoder, decoder);
        let want: Vec<Vec<f32>> = pt
            .model
            .student
            .named_params("")
            .iter()
            .map(|(_, t)| t.to_vec())
            .collect();
        let got: Vec<Vec<f32>> = loaded
            .encoder
            .named_params("")
            .iter()
            .map(|(_, t)| t.to_vec())
            .collect();
        assert_eq!(got, want);
        let err = load_pretrained_encoder::<f32>(&ckpt, Some(&small_model(3))).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }
}

#[test]
fn classifier_checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Classifier::new(encoder(2, 10), &[8], 3, 0.5, &mut rng).unwrap();
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let ckpt = save_classifier(&model, &names, &[8], 0.5, 4).unwrap();
    let bytes = ckpt.to_bytes();
    let back = point2vec::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    let (loaded, meta) = load_classifier::<f64>(&back).unwrap();
    assert_eq!(meta.classes, names);
    assert_eq!(meta.epoch, 4);
    let set = tokenize(&cloud(10), 8, 8, 0).unwrap();
    let a = model
        .forward(std::slice::from_ref(&set), EncoderGrad::Frozen, &mut ForwardCtx::eval())
        .unwrap();
    let b = loaded
        .forward(&[set], EncoderGrad::Frozen, &mut ForwardCtx::eval())
        .unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
    assert_eq!(
        save_classifier(&loaded, &names, &[8], 0.5, 4)
            .unwrap()
            .to_bytes(),
        bytes
    );
}
