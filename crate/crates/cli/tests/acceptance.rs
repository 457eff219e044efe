//! One pass/fail line per acceptance criterion, written straight to stderr so
//! it shows even when the harness captures output. Criteria run one at a
//! time, so the wall-clock budgets measure a single workload.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use point2vec::backbone::{EncoderConfig, ForwardCtx};
use point2vec::data::{generate_synthetic_shape, random_primitive, SyntheticShapeSpec};
use point2vec::diagnostics::{fps_oracle_trials, gradient_suite, knn_oracle_trials};
use point2vec::downstream::{mean_std, sample_fewshot_episode};
use point2vec::embedding::PointNetDims;
use point2vec::geometry::{fps_resample, tokenize};
use point2vec::numerics::Module;
use point2vec::pretraining::{
    generate_mask, mask_count, mask_coverage, BatchMask, EmaConfig, MaskCoverage, MaskLayout,
    PretrainModel,
};
use point2vec::{
    strict_mode, Checkpoint, MaskStrategy, Mode, ModelConfig, PatchSet, PretrainConfig, Pretrainer,
};
use point2vec_cli::analysis::analyze_mask;
use point2vec_cli::finetune::{finetune_classification, finetune_partseg, Stop};
use point2vec_cli::pretrain::{pretrain, FINAL_CHECKPOINT};
use point2vec_cli::{Run, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_MAX_REL_ERROR: f64 = 1e-4;
const GRAD_BUDGET: u64 = 60;
const ORACLE_CLOUDS: usize = 1000;
const ORACLE_BUDGET: u64 = 30;
const LEAK_TRIALS: u64 = 100;
const LEAK_MIN_L2: f64 = 1e-6;
const LEAK_BUDGET: u64 = 60;
const EMA_STEPS: usize = 1000;
const EMA_MAX_ULPS: i64 = 4;
const TAU_START: f64 = 0.9998;
const TAU_END: f64 = 0.99999;
const TARGET_BATCHES: u64 = 100;
const TARGET_MAX_MEAN: f64 = 1e-5;
const TARGET_MAX_VAR_GAP: f64 = 1e-3;
const OVERFIT_LOSS: f64 = 0.01;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_BUDGET: u64 = 300;
const SCRATCH_TARGET: f64 = 0.95;
const SCRATCH_EPOCHS: u64 = 60;
const COMPARE_EPOCH: u64 = 10;
const MIN_GAIN: f64 = 0.02;
const TRANSFER_BUDGET: u64 = 1800;
const MASK_TOKENS: usize = 64;
const MASK_RATIO: f64 = 0.65;
const MASKED_TOKENS: usize = 42;
const EPISODES: usize = 100;
const FEWSHOT_RUNS: usize = 10;
const PARTSEG_TARGET: f64 = 0.90;
const PARTSEG_BUDGET: u64 = 900;
const SEEDS: [u64; 3] = [0, 1, 2];

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one criterion under the global lock and prints its verdict line.
fn criterion(id: u32, name: &str, budget: Option<u64>, body: impl FnOnce() -> (bool, String)) {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = body();
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= Duration::from_secs(b));
    let pass = ok && in_time;
    let limit = budget.map(|b| format!(" / {b}s")).unwrap_or_default();
    let line = format!(
        "acceptance {id:>2} {} {name}: {detail} [{:.1}s{limit}]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> RunConfig {
    RunConfig::load(&configs_dir().join(name)).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth: 4,
            dim: 32,
            heads: 4,
            ..EncoderConfig::default()
        },
        pointnet: PointNetDims {
            first: [32, 32],
            second: [64, 32],
        },
        pos_hidden: 32,
    }
}

/// Tokenized synthetic shapes cycling through the five classes.
fn shape_batch(count: usize, points: usize, n: usize, k: usize, seed: u64) -> Vec<PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let cloud = generate_synthetic_shape(&SyntheticShapeSpec {
                primitive: random_primitive(i % 5, &mut rng),
                noise: 0.01,
                points,
                seed: rng.random(),
            })
            .unwrap();
            tokenize(&cloud, n, k, rng.random()).unwrap()
        })
        .collect()
}

fn random_masks(sets: &[PatchSet], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<MaskLayout> {
    sets.iter()
        .map(|s| generate_mask(&s.centers, MaskStrategy::Random, ratio, rng).unwrap())
        .collect()
}

fn pretrain_config(batch: usize, epochs: u64) -> PretrainConfig {
    PretrainConfig {
        batch_size: Some(batch),
        epochs,
        warmup_epochs: 2,
        target_layers: 2,
        decoder_depth: Some(2),
        lr: Some(1e-3),
        points: 256,
        centers: 16,
        group_size: 16,
        ..PretrainConfig::default()
    }
}

#[test]
fn c01_gradients_match_finite_differences() {
    criterion(
        1,
        "analytic gradients vs f64 central differences",
        Some(GRAD_BUDGET),
        || {
            let checks = gradient_suite().unwrap();
            let worst = checks
                .iter()
                .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                .unwrap();
            let failing: Vec<&str> = checks
                .iter()
                .filter(|c| !(c.rel_error < GRAD_MAX_REL_ERROR))
                .map(|c| c.name.as_str())
                .collect();
            let has_end_to_end = checks.iter().any(|c| c.name.contains("point2vec"))
                && checks.iter().any(|c| c.name.contains("data2vec"));
            (
                failing.is_empty() && has_end_to_end,
                format!(
                "{} checks, worst {} at {:.2e} (limit {GRAD_MAX_REL_ERROR:e}), failing {failing:?}",
                checks.len(),
                worst.name,
                worst.rel_error
            ),
            )
        },
    );
}

#[test]
fn c02_geometry_matches_oracles() {
    criterion(
        2,
        "FPS and kNN equal their exhaustive oracles",
        Some(ORACLE_BUDGET),
        || {
            let fps = fps_oracle_trials(ORACLE_CLOUDS, 2);
            let knn = knn_oracle_trials(ORACLE_CLOUDS, 2).unwrap();
            (
                fps.clouds == ORACLE_CLOUDS
                    && knn.clouds == ORACLE_CLOUDS
                    && fps.mismatches == 0
                    && knn.mismatches == 0,
                format!(
                    "fps {}/{} clouds mismatched, knn {}/{} clouds mismatched",
                    fps.mismatches, fps.clouds, knn.mismatches, knn.clouds
                ),
            )
        },
    );
}

/// Moves every point of every masked patch, and the masked centers.
fn perturb_masked(
    sets: &[PatchSet],
    layouts: &[MaskLayout],
    rng: &mut ChaCha8Rng,
) -> Vec<PatchSet> {
    sets.iter()
        .zip(layouts)
        .map(|(s, l)| {
            let mut s = s.clone();
            let k = s.group_size;
            for i in l.masked() {
                for v in &mut s.normalized[i * k * 3..(i + 1) * k * 3] {
                    *v += rng.random_range(-0.3..0.3);
                }
                for c in &mut s.centers[i] {
                    *c += rng.random_range(-0.3f32..0.3);
                }
            }
            s
        })
        .collect()
}

#[test]
fn c03_leakage_dichotomy() {
    criterion(
        3,
        "masked geometry reaches the student only in data2vec_pc",
        Some(LEAK_BUDGET),
        || {
            let _strict = strict_mode();
            let mut identical = 0;
            let mut min_l2 = f64::INFINITY;
            for trial in 0..LEAK_TRIALS {
                let mut rng = ChaCha8Rng::seed_from_u64(trial);
                let sets = shape_batch(1, 256, 16, 16, trial);
                let layouts = random_masks(&sets, MASK_RATIO, &mut rng);
                let mask = BatchMask::new(&layouts).unwrap();
                let moved = perturb_masked(&sets, &layouts, &mut rng);
                for mode in [Mode::Point2vec, Mode::Data2vecPc] {
                    let dd = (mode == Mode::Point2vec).then_some(2);
                    let m = PretrainModel::<f32>::new(small_model(), mode, dd, &mut rng).unwrap();
                    let student = |s: &[PatchSet]| {
                        let emb = m.student.embed(s).unwrap();
                        m.student_forward(&emb, &mask, &mut ForwardCtx::eval())
                            .unwrap()
                            .last()
                            .to_vec()
                    };
                    let (a, b) = (student(&sets), student(&moved));
                    match mode {
                        Mode::Point2vec => {
                            identical += usize::from(
                                a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                            )
                        }
                        Mode::Data2vecPc => {
                            let l2 = a
                                .iter()
                                .zip(&b)
                                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                                .sum::<f64>()
                                .sqrt();
                            min_l2 = min_l2.min(l2);
                        }
                    }
                }
            }
            (
            identical == LEAK_TRIALS as usize && min_l2 > LEAK_MIN_L2,
            format!("point2vec bit-identical in {identical}/{LEAK_TRIALS}, data2vec_pc min L2 {min_l2:.3e} (limit > {LEAK_MIN_L2:e})"),
        )
        },
    );
}

#[test]
fn c04_teacher_is_exact_ema() {
    criterion(4, "teacher follows the EMA of the student", None, || {
        // two steps per epoch, so the 200-epoch decay warm-up ends at step 400
        let cfg = PretrainConfig {
            ema: EmaConfig::default(),
            ..pretrain_config(4, EMA_STEPS as u64 / 2)
        };
        let sets = shape_batch(4, 256, 16, 16, 4);
        let mut pt = Pretrainer::<f32>::new(small_model(), cfg, 8, 4).unwrap();
        let warmup_end = pt.ema_warmup_steps();
        let mut worst = 0i64;
        let mut taus = Vec::new();
        for _ in 0..EMA_STEPS {
            let before: Vec<Vec<f32>> = pt
                .model
                .teacher
                .named_params("")
                .iter()
                .map(|(_, t)| t.to_vec())
                .collect();
            let rec = pt.step_on(&sets).unwrap();
            taus.push(rec.tau);
            let student = pt.model.student.named_params("");
            let teacher = pt.model.teacher.named_params("");
            for (prev, ((_, s), (_, t))) in before.iter().zip(student.iter().zip(&teacher)) {
                for ((&p, &s), &t) in prev.iter().zip(&s.to_vec()).zip(&t.to_vec()) {
                    let expect = (rec.tau * p as f64 + (1.0 - rec.tau) * s as f64) as f32;
                    worst = worst.max((expect.to_bits() as i64 - t.to_bits() as i64).abs());
                }
            }
        }
        let start_exact = taus[0] == TAU_START;
        let end_exact = taus[warmup_end as usize] == TAU_END && taus[EMA_STEPS - 1] == TAU_END;
        (
            worst <= EMA_MAX_ULPS && start_exact && end_exact,
            format!(
                "{EMA_STEPS} steps, worst {worst} ulps (limit {EMA_MAX_ULPS}), tau(0) = {}, tau({warmup_end}) = {}",
                taus[0], taus[warmup_end as usize]
            ),
        )
    });
}

#[test]
fn c05_targets_are_standardized() {
    criterion(
        5,
        "teacher targets have zero mean and unit variance per token",
        None,
        || {
            let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
            let mut tokens = 0;
            for b in 0..TARGET_BATCHES {
                let mut rng = ChaCha8Rng::seed_from_u64(b);
                let m =
                    PretrainModel::<f32>::new(small_model(), Mode::Point2vec, Some(2), &mut rng)
                        .unwrap();
                let sets = shape_batch(4, 256, 16, 16, 1000 + b);
                let k = 1 + (b as usize % 4);
                let t = m.targets(&sets, k).unwrap().to_vec();
                for row in t.chunks(32) {
                    let mean = row.iter().map(|&x| x as f64).sum::<f64>() / 32.0;
                    let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / 32.0;
                    worst_mean = worst_mean.max(mean.abs());
                    worst_var = worst_var.max((var - 1.0).abs());
                    tokens += 1;
                }
            }
            (
            worst_mean < TARGET_MAX_MEAN && worst_var < TARGET_MAX_VAR_GAP,
            format!(
                "{tokens} tokens over {TARGET_BATCHES} batches, max |mean| {worst_mean:.2e} (limit {TARGET_MAX_MEAN:e}), max |var - 1| {worst_var:.2e} (limit {TARGET_MAX_VAR_GAP:e})"
            ),
        )
        },
    );
}

#[test]
fn c06_fixed_batch_overfits() {
    criterion(
        6,
        "pretraining loss on a fixed batch of 8",
        Some(OVERFIT_BUDGET),
        || {
            let mut finals = Vec::new();
            let mut first_hits = Vec::new();
            for seed in SEEDS {
                // the batch is fixed down to its masks
                let sets = shape_batch(8, 256, 16, 16, 60 + seed);
                let layouts = random_masks(&sets, MASK_RATIO, &mut ChaCha8Rng::seed_from_u64(seed));
                // a schedule four times longer keeps the rate near its peak
                let cfg = pretrain_config(8, 4 * OVERFIT_STEPS as u64);
                let mut pt = Pretrainer::<f32>::new(small_model(), cfg, 8, seed).unwrap();
                let mut best = f64::INFINITY;
                let mut hit = None;
                for step in 0..OVERFIT_STEPS {
                    let loss = pt.step_with_masks(&sets, &layouts).unwrap().loss;
                    best = best.min(loss);
                    if hit.is_none() && loss < OVERFIT_LOSS {
                        hit = Some(step + 1);
                    }
                }
                finals.push(best);
                first_hits.push(hit);
            }
            let m = median(finals.clone());
            (
            m < OVERFIT_LOSS,
            format!(
                "median lowest loss {m:.4} (limit {OVERFIT_LOSS}) within {OVERFIT_STEPS} steps, per seed {finals:.4?}, first step below {first_hits:?}"
            ),
        )
        },
    );
}

#[test]
fn c07_pretraining_speeds_up_fine_tuning() {
    criterion(
        7,
        "pretraining helps classification on synthetic shapes",
        Some(TRANSFER_BUDGET),
        || {
            let config = shipped("desk.json");
            let root = tempfile::tempdir().unwrap();
            let (mut scratch_best, mut scratch_at, mut tuned_at, mut gains) =
                (vec![], vec![], vec![], vec![]);
            for seed in SEEDS {
                let dir = root.path().join(seed.to_string());
                let run =
                    |name: &str| Run::new(config.clone(), Some(seed), &dir.join(name)).unwrap();
                let pre = run("pretrain");
                pretrain(&pre, None, |_, _| {}).unwrap();
                let ckpt = Checkpoint::load(&pre.path(FINAL_CHECKPOINT)).unwrap();
                let scratch_stop = Stop {
                    accuracy: Some(SCRATCH_TARGET),
                    min_epochs: COMPARE_EPOCH,
                    epoch: Some(SCRATCH_EPOCHS),
                };
                let scratch =
                    finetune_classification(&run("scratch"), None, scratch_stop, |_| {}).unwrap();
                let tuned_stop = Stop {
                    epoch: Some(COMPARE_EPOCH),
                    ..Stop::default()
                };
                let tuned = finetune_classification(&run("tuned"), Some(&ckpt), tuned_stop, |_| {})
                    .unwrap();
                let at = |h: &[point2vec::downstream::EpochLog]| {
                    h.iter()
                        .find(|e| e.epoch == COMPARE_EPOCH)
                        .unwrap()
                        .test_accuracy
                };
                scratch_best.push(scratch.best_accuracy);
                scratch_at.push(at(&scratch.history));
                tuned_at.push(at(&tuned.history));
                gains.push(at(&tuned.history) - at(&scratch.history));
            }
            let (best, gain) = (median(scratch_best.clone()), median(gains.clone()));
            (
            best >= SCRATCH_TARGET && gain >= MIN_GAIN,
            format!(
                "(a) median scratch best {:.1}% within {SCRATCH_EPOCHS} epochs (need {:.0}%), per seed {scratch_best:.3?}; \
                 (b) epoch {COMPARE_EPOCH}: scratch {scratch_at:.3?}, pretrained {tuned_at:.3?}, median gain {:+.1} points (need {:+.0})",
                best * 100.0,
                SCRATCH_TARGET * 100.0,
                gain * 100.0,
                MIN_GAIN * 100.0
            ),
        )
        },
    );
}

/// Points under at least one masked patch and at least one visible patch,
/// counted by scanning every patch for every point.
fn brute_force_coverage(points: usize, set: &PatchSet, layout: &MaskLayout) -> MaskCoverage {
    let k = set.group_size;
    let mut c = MaskCoverage {
        points,
        ..MaskCoverage::default()
    };
    for p in 0..points {
        let mut masked = false;
        let mut visible = false;
        for (i, group) in set.group_indices.chunks(k).enumerate() {
            if group.contains(&p) {
                if layout.masked().contains(&i) {
                    masked = true;
                } else {
                    visible = true;
                }
            }
        }
        match (masked, visible) {
            (true, false) => c.masked_only += 1,
            (false, true) => c.visible_only += 1,
            (true, true) => c.both += 1,
            (false, false) => c.uncovered += 1,
        }
    }
    c
}

#[test]
fn c08_mask_accounting() {
    criterion(8, "mask counts and point coverage", None, || {
        let count_ok = mask_count(MASK_TOKENS, MASK_RATIO).unwrap() == MASKED_TOKENS;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layouts_ok = true;
        for strategy in [MaskStrategy::Random, MaskStrategy::Block] {
            for _ in 0..20 {
                let centers: Vec<[f32; 3]> = (0..MASK_TOKENS)
                    .map(|_| [0; 3].map(|_: u8| rng.random_range(-1.0..1.0)))
                    .collect();
                layouts_ok &= generate_mask(&centers, strategy, MASK_RATIO, &mut rng)
                    .unwrap()
                    .masked_count()
                    == MASKED_TOKENS;
            }
        }

        let out = tempfile::tempdir().unwrap();
        let run = Run::new(shipped("desk.json"), None, out.path()).unwrap();
        let cfg = run.config.analyze_mask.clone();
        let shape_ok = cfg.points == 1024 && cfg.centers == MASK_TOKENS && cfg.group_size == 32;
        let rows = analyze_mask(&run).unwrap();

        // recompute every sample with the brute-force counter
        let dataset = run.dataset().unwrap();
        let mut oracle_ok = true;
        let mut partition_ok = true;
        for row in &rows {
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            let mut total = MaskCoverage::default();
            for (i, s) in dataset.samples.iter().take(cfg.samples).enumerate() {
                let seed = run.seed + i as u64;
                let cloud = fps_resample(&s.cloud, cfg.points, seed).unwrap();
                let set = tokenize(&cloud, cfg.centers, cfg.group_size, seed).unwrap();
                let layout =
                    generate_mask(&set.centers, row.strategy, row.ratio, &mut rng).unwrap();
                let expect = brute_force_coverage(cloud.len(), &set, &layout);
                oracle_ok &= row.per_sample[i] == expect;
                oracle_ok &=
                    mask_coverage(cloud.len(), &set.group_indices, set.group_size, &layout)
                        .unwrap()
                        == expect;
                total.merge(&expect);
            }
            let c = &row.coverage;
            oracle_ok &= *c == total;
            partition_ok &= c.masked_only + c.visible_only + c.both + c.uncovered == c.points;
            partition_ok &= c.points == cfg.samples * cfg.points;
        }
        let random = rows
            .iter()
            .find(|r| r.strategy == MaskStrategy::Random && r.ratio == MASK_RATIO)
            .unwrap();
        let masked_only = random.coverage.fraction(random.coverage.masked_only);
        (
            count_ok && layouts_ok && shape_ok && oracle_ok && partition_ok && masked_only > 0.0,
            format!(
                "{MASKED_TOKENS} of {MASK_TOKENS} masked: {}, counting oracle agrees: {oracle_ok}, fractions partition: {partition_ok}, \
                 masked-only fraction at {MASK_RATIO} = {masked_only:.4} over {} points",
                count_ok && layouts_ok,
                random.coverage.points
            ),
        )
    });
}

fn run_fewshot_binary(config: &Path, out: &Path) -> (bool, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_point2vec"))
        .args(["fewshot", "--runs", &FEWSHOT_RUNS.to_string(), "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    (
        output.status.success(),
        String::from_utf8_lossy(&output.stdout).trim().to_string(),
    )
}

#[test]
fn c09_fewshot_protocol() {
    criterion(9, "few-shot episodes and report", None, || {
        let labels: Vec<usize> = (0..10).flat_map(|c| vec![c; 60]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut episodes_ok = true;
        for (way, shot, support, query) in [(5, 10, 50, 100), (10, 20, 200, 200)] {
            for _ in 0..EPISODES {
                let ep = sample_fewshot_episode(&labels, way, shot, &mut rng).unwrap();
                episodes_ok &= ep.support.len() == support && ep.query.len() == query;
                let mut seen = std::collections::BTreeSet::new();
                for &(i, l) in ep.support.iter().chain(&ep.query) {
                    episodes_ok &= seen.insert(i) && labels[i] == ep.classes[l];
                }
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let mut config = shipped("desk.json");
        config.fewshot.epochs = Some(2);
        let path = dir.path().join("fewshot.json");
        std::fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
        let out = dir.path().join("out");
        let (status_ok, stdout) = run_fewshot_binary(&path, &out);
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("fewshot.json")).unwrap()).unwrap();
        let accs: Vec<f64> = report["accuracies"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let (mean, std) = mean_std(&accs);
        let stats_ok = accs.len() == FEWSHOT_RUNS
            && (report["mean"].as_f64().unwrap() - mean).abs() < 1e-12
            && (report["std"].as_f64().unwrap() - std).abs() < 1e-12;
        let line_ok = stdout.contains(&format!("over {FEWSHOT_RUNS} runs")) && stdout.contains('±');
        (
            episodes_ok && status_ok && stats_ok && line_ok,
            format!("{EPISODES} episodes per setting sized and disjoint: {episodes_ok}; report `{stdout}`"),
        )
    });
}

#[test]
fn c10_checkpoints_round_trip_and_resume() {
    criterion(10, "checkpoint bytes and strict resume", None, || {
        let _strict = strict_mode();
        let batches: Vec<Vec<PatchSet>> = (0..4)
            .map(|i| shape_batch(4, 256, 16, 16, 100 + i))
            .collect();
        let mut full =
            Pretrainer::<f32>::new(small_model(), pretrain_config(4, 10), 8, 10).unwrap();
        for b in &batches[..3] {
            full.step_on(b).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.p2vc");
        let saved = full.checkpoint().unwrap();
        saved.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let bytes_ok = loaded.to_bytes() == std::fs::read(&path).unwrap()
            && loaded.to_bytes() == saved.to_bytes();

        let expected = full.step_on(&batches[3]).unwrap();
        let mut resumed = Pretrainer::<f32>::from_checkpoint(&loaded).unwrap();
        let state_ok = resumed.checkpoint().unwrap().to_bytes() == saved.to_bytes();
        let got = resumed.step_on(&batches[3]).unwrap();
        let loss_ok = got.loss.to_bits() == expected.loss.to_bits() && got.step == expected.step;
        (
            bytes_ok && state_ok && loss_ok,
            format!(
                "save/load/save identical: {bytes_ok}, reloaded state identical: {state_ok}, next loss {} vs {}",
                got.loss, expected.loss
            ),
        )
    });
}

#[test]
fn c11_part_segmentation() {
    criterion(
        11,
        "part segmentation on banded cylinders",
        Some(PARTSEG_BUDGET),
        || {
            let config = shipped("desk-partseg.json");
            let root = tempfile::tempdir().unwrap();
            let (mut accs, mut keys_ok) = (Vec::new(), true);
            let mut ious = Vec::new();
            for seed in SEEDS {
                let dir = root.path().join(seed.to_string());
                let pre = Run::new(config.clone(), Some(seed), &dir.join("pretrain")).unwrap();
                pretrain(&pre, None, |_, _| {}).unwrap();
                let ckpt = Checkpoint::load(&pre.path(FINAL_CHECKPOINT)).unwrap();
                let tune = Run::new(config.clone(), Some(seed), &dir.join("partseg")).unwrap();
                let m = finetune_partseg(&tune, Some(&ckpt), |_| {}).unwrap();
                let json: serde_json::Value =
                    serde_json::from_slice(&std::fs::read(tune.path("metrics.json")).unwrap())
                        .unwrap();
                for key in ["point_accuracy", "miou_c", "miou_i"] {
                    keys_ok &= json
                        .get(key)
                        .and_then(|v| v.as_f64())
                        .is_some_and(f64::is_finite);
                }
                accs.push(m.final_metrics.point_accuracy);
                ious.push((m.final_metrics.iou.miou_c, m.final_metrics.iou.miou_i));
            }
            let acc = median(accs.clone());
            (
            acc >= PARTSEG_TARGET && keys_ok,
            format!(
                "median point accuracy {:.1}% (need {:.0}%), per seed {accs:.3?}, (mIoU_C, mIoU_I) {ious:.3?}, both reported: {keys_ok}",
                acc * 100.0,
                PARTSEG_TARGET * 100.0
            ),
        )
        },
    );
}
