//! Classification, part segmentation, few-shot and evaluation commands.

use point2vec::downstream::{
    category_parts, fewshot_accuracies, load_classifier, load_pretrained_encoder, mean_std,
    sample_fewshot_episode, save_classifier, ClassificationTrainer, ConfusionMatrix, EpochLog,
    EvalSet, PartSegMetrics, PartSegTrainer,
};
use point2vec::numerics::Module;
use point2vec::{Checkpoint, DType, Error, ModelConfig, PointEncoder, Result, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::output::{epoch_row, write_json, TsvLog, EPOCH_HEADER};
use crate::run::Run;

pub const METRICS_FILE: &str = "metrics.json";

/// The student of `ckpt`, or a fresh encoder seeded from the run seed.
pub fn initial_encoder(run: &Run, ckpt: Option<&Checkpoint>) -> Result<PointEncoder<f32>> {
    match ckpt {
        Some(c) => Ok(load_pretrained_encoder(c, Some(&run.config.model))?.encoder),
        None => PointEncoder::new(run.config.model, &mut ChaCha8Rng::seed_from_u64(run.seed)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub task: &'static str,
    pub pretrained: bool,
    /// Test accuracy before the first update.
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: u64,
    pub history: Vec<EpochLog>,
}

/// Early exit for a fine-tuning run; the learning-rate schedule still spans
/// the configured epochs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stop {
    /// Test accuracy that ends the run once `min_epochs` have passed.
    pub accuracy: Option<f64>,
    pub min_epochs: u64,
    /// Last epoch to train.
    pub epoch: Option<u64>,
}

impl Stop {
    fn reached(&self, entry: &EpochLog) -> bool {
        (entry.epoch >= self.min_epochs && self.accuracy.is_some_and(|a| entry.test_accuracy >= a))
            || self.epoch.is_some_and(|e| entry.epoch >= e)
    }
}

/// Fine-tunes a classifier, evaluating on the test split after every epoch.
pub fn finetune_classification(
    run: &Run,
    ckpt: Option<&Checkpoint>,
    stop: Stop,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<ClassificationMetrics> {
    let dataset = run.dataset()?;
    let train = run.split(&dataset, Split::Train)?;
    let test = run.split(&dataset, Split::Test)?;
    let cfg = &run.config.classification;
    let encoder = initial_encoder(run, ckpt)?;
    let mut trainer = ClassificationTrainer::new(
        encoder,
        dataset.classes.len(),
        cfg,
        ckpt.is_some(),
        train.len(),
        run.seed,
    )?;
    let eval = EvalSet::new(&test, &trainer.state.recipe)?;
    let mut log = TsvLog::open(&run.path("finetune_cls.tsv"), EPOCH_HEADER)?;
    let initial_accuracy = trainer.evaluate(&eval)?.accuracy();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let train_loss = trainer.train_epoch(&train)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            test_accuracy: trainer.evaluate(&eval)?.accuracy(),
        };
        log.row(epoch_row(&entry))?;
        on_epoch(&entry);
        history.push(entry);
        if stop.reached(&entry) {
            break;
        }
    }
    let best = history
        .iter()
        .fold(None::<&EpochLog>, |b, e| match b {
            Some(b) if b.test_accuracy >= e.test_accuracy => Some(b),
            _ => Some(e),
        })
        .expect("at least one epoch");
    let metrics = ClassificationMetrics {
        task: "classification",
        pretrained: ckpt.is_some(),
        initial_accuracy,
        final_accuracy: history.last().expect("at least one epoch").test_accuracy,
        best_accuracy: best.test_accuracy,
        best_epoch: best.epoch,
        history: history.clone(),
    };
    save_classifier(
        &trainer.model,
        &dataset.classes,
        &cfg.head_hidden,
        cfg.head_dropout,
        trainer.state.epoch,
    )?
    .save(&run.path("classifier.p2vc"))?;
    write_json(&run.path(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartSegRunMetrics {
    pub task: &'static str,
    pub pretrained: bool,
    #[serde(flatten)]
    pub final_metrics: PartSegMetrics,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize)]
struct SegmenterMeta {
    kind: &'static str,
    dtype: DType,
    model: ModelConfig,
    object_classes: usize,
    parts: usize,
    epoch: u64,
}

/// Fine-tunes the part segmenter; the test-split log reports per-point
/// accuracy.
pub fn finetune_partseg(
    run: &Run,
    ckpt: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PartSegRunMetrics> {
    let dataset = run.dataset()?;
    if !dataset.has_part_labels() {
        return Err(run.data_error("part segmentation needs per-point part labels"));
    }
    let train = run.split(&dataset, Split::Train)?;
    let test = run.split(&dataset, Split::Test)?;
    let cfg = &run.config.part_segmentation;
    let classes = dataset.classes.len();
    let parts = dataset.part_count();
    let encoder = initial_encoder(run, ckpt)?;
    let mut trainer = PartSegTrainer::new(encoder, classes, parts, cfg, train.len(), run.seed)?;
    let cat_parts = category_parts(&train, classes)?;
    let eval = EvalSet::new(&test, &trainer.state.recipe)?;
    let mut log = TsvLog::open(&run.path("finetune_partseg.tsv"), EPOCH_HEADER)?;
    let mut history = Vec::new();
    let mut last = None;
    for epoch in 1..=cfg.epochs {
        let train_loss = trainer.train_epoch(&train)?;
        let m = trainer.evaluate(&eval, &cat_parts)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            test_accuracy: m.point_accuracy,
        };
        log.row(epoch_row(&entry))?;
        on_epoch(&entry);
        history.push(entry);
        last = Some(m);
    }
    let meta = SegmenterMeta {
        kind: "segmenter",
        dtype: DType::F32,
        model: trainer.model.encoder.config,
        object_classes: classes,
        parts,
        epoch: trainer.state.epoch,
    };
    let mut out = Checkpoint::new(&meta)?;
    out.insert_module("", &trainer.model)?;
    out.save(&run.path("segmenter.p2vc"))?;
    let metrics = PartSegRunMetrics {
        task: "part_segmentation",
        pretrained: ckpt.is_some(),
        final_metrics: last.expect("at least one epoch"),
        history,
    };
    write_json(&run.path(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotReport {
    pub way: usize,
    pub shot: usize,
    pub runs: usize,
    pub pretrained: bool,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for FewShotReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}-way {}-shot over {} runs: {:.2} ± {:.2}",
            self.way,
            self.shot,
            self.runs,
            100.0 * self.mean,
            100.0 * self.std
        )
    }
}

/// Episodes drawn from the training split; each fine-tunes its own copy of
/// the encoder.
pub fn fewshot(run: &Run, ckpt: Option<&Checkpoint>) -> Result<FewShotReport> {
    let dataset = run.dataset()?;
    let pool = run.split(&dataset, Split::Train)?;
    let f = &run.config.fewshot;
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    sample_fewshot_episode(&labels, f.way, f.shot, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| run.data_error(e.to_string()))?;
    let mut cfg = run.config.classification.clone();
    cfg.epochs = f.epochs.unwrap_or(cfg.epochs);
    cfg.warmup_epochs = cfg.warmup_epochs.min(cfg.epochs);
    let encoder = initial_encoder(run, ckpt)?;
    let accuracies = fewshot_accuracies(
        &encoder,
        &pool,
        &cfg,
        ckpt.is_some(),
        f.way,
        f.shot,
        f.runs,
        run.seed,
    )?;
    let (mean, std) = mean_std(&accuracies);
    let report = FewShotReport {
        way: f.way,
        shot: f.shot,
        runs: f.runs,
        pretrained: ckpt.is_some(),
        accuracies,
        mean,
        std,
    };
    write_json(&run.path("fewshot.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub classes: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Test-split confusion matrix of a saved classifier.
pub fn evaluate(run: &Run, ckpt: &Checkpoint) -> Result<EvalReport> {
    let (model, meta) = load_classifier::<f32>(ckpt)?;
    let dataset = run.dataset()?;
    if dataset.classes != meta.classes {
        return Err(run.data_error(format!(
            "dataset classes {:?} differ from the classifier's {:?}",
            dataset.classes, meta.classes
        )));
    }
    let test = run.split(&dataset, Split::Test)?;
    let mut cfg = run.config.classification.clone();
    cfg.head_hidden = meta.head_hidden.clone();
    let mut trainer = ClassificationTrainer::new(
        model.encoder.clone(),
        meta.classes.len(),
        &cfg,
        true,
        1,
        run.seed,
    )?;
    trainer.model = model;
    let eval = EvalSet::new(&test, &trainer.state.recipe)?;
    let confusion = trainer.evaluate(&eval)?;
    let report = EvalReport {
        accuracy: confusion.accuracy(),
        classes: meta.classes,
        recall: confusion.recall(),
        precision: confusion.precision(),
        confusion,
    };
    write_json(&run.path("eval.json"), &report)?;
    Ok(report)
}

impl EvalReport {
    /// Rows are true classes, columns predictions.
    pub fn table(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in &self.classes {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.confusion.counts) {
            out.push_str(c);
            for v in row {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Parameter values of every encoder tensor, for freeze checks.
pub fn encoder_snapshot(encoder: &PointEncoder<f32>) -> Vec<Vec<f32>> {
    encoder
        .named_params("")
        .iter()
        .map(|(_, t)| t.to_vec())
        .collect()
}

pub fn require_checkpoint<'a>(
    ckpt: Option<&'a Checkpoint>,
    command: &str,
) -> Result<&'a Checkpoint> {
    ckpt.ok_or_else(|| Error::Config {
        key: "--checkpoint".into(),
        msg: format!("`{command}` needs a checkpoint"),
    })
}
