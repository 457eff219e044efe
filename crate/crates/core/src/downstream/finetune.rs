use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fewshot::sample_fewshot_episode;
use super::heads::{Classifier, EncoderGrad, PartSegHead, Segmenter};
use super::metrics::{aggregate_part_iou, instance_miou, ConfusionMatrix, PartIou};
use crate::backbone::ForwardCtx;
use crate::data::{augment, AugmentationSpec, Sample};
use crate::error::{Error, Result};
use crate::geometry::{fps_resample, tokenize_batch, PatchSet, Point, PointCloud};
use crate::model::PointEncoder;
use crate::numerics::{
    label_smoothing_cross_entropy, AdamW, AdamWConfig, Element, LrSchedule, Module, Tensor,
};

/// Optimization and input settings shared by every fine-tuning task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecipe {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: u64,
    /// Epochs during which only the head is trained.
    pub freeze_epochs: u64,
    pub optimizer: AdamWConfig,
    pub drop_path: f64,
    pub points: usize,
    pub centers: usize,
    pub group_size: usize,
    pub augmentation: AugmentationSpec,
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param(
                "fine-tuning needs a positive batch size and epoch count",
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::param("warm-up longer than training"));
        }
        if self.centers == 0
            || self.centers > self.points
            || self.group_size == 0
            || self.group_size > self.points
        {
            return Err(Error::param(format!(
                "{} centers of {} points from {}-point clouds",
                self.centers, self.group_size, self.points
            )));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Learning rate when starting from pretrained weights.
    pub lr: f64,
    /// Learning rate when training from scratch.
    pub scratch_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: u64,
    /// Encoder freeze for pretrained starts; from-scratch runs never freeze.
    pub freeze_epochs: u64,
    pub optimizer: AdamWConfig,
    pub label_smoothing: f64,
    pub head_hidden: Vec<usize>,
    pub head_dropout: f64,
    pub drop_path: f64,
    pub points: usize,
    pub centers: usize,
    pub group_size: usize,
    pub augmentation: AugmentationSpec,
}

impl Default for ClassificationConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            lr: 3e-4,
            scratch_lr: 1e-3,
            min_lr: 1e-6,
            warmup_epochs: 10,
            freeze_epochs: 100,
            optimizer: AdamWConfig::default(),
            label_smoothing: 0.2,
            head_hidden: vec![256, 256],
            head_dropout: 0.5,
            drop_path: 0.2,
            points: 1024,
            centers: 64,
            group_size: 32,
            augmentation: AugmentationSpec::finetune(),
        }
    }
}

impl ClassificationConfig {
    pub fn recipe(&self, pretrained: bool) -> TrainRecipe {
        TrainRecipe {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: if pretrained { self.lr } else { self.scratch_lr },
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            freeze_epochs: if pretrained { self.freeze_epochs } else { 0 },
            optimizer: self.optimizer,
            drop_path: self.drop_path,
            points: self.points,
            centers: self.centers,
            group_size: self.group_size,
            augmentation: self.augmentation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartSegConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: u64,
    pub freeze_epochs: u64,
    pub optimizer: AdamWConfig,
    pub propagation_dim: usize,
    pub head_hidden: Vec<usize>,
    pub head_dropout: f64,
    pub drop_path: f64,
    pub points: usize,
    pub centers: usize,
    pub group_size: usize,
    pub augmentation: AugmentationSpec,
}

impl Default for PartSegConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            lr: 2e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            freeze_epochs: 0,
            optimizer: AdamWConfig::default(),
            propagation_dim: 384,
            head_hidden: vec![512, 256],
            head_dropout: 0.5,
            drop_path: 0.2,
            points: 2048,
            centers: 128,
            group_size: 32,
            augmentation: AugmentationSpec {
                unit_sphere: true,
                ..AugmentationSpec::none()
            },
        }
    }
}

impl PartSegConfig {
    pub fn recipe(&self) -> TrainRecipe {
        TrainRecipe {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            freeze_epochs: self.freeze_epochs,
            optimizer: self.optimizer,
            drop_path: self.drop_path,
            points: self.points,
            centers: self.centers,
            group_size: self.group_size,
            augmentation: self.augmentation,
        }
    }
}

/// Deterministic view of a test cloud: fixed FPS seed, and only the
/// non-random augmentation stage (unit-sphere normalization) applied.
pub fn eval_view(cloud: &PointCloud, recipe: &TrainRecipe, index: usize) -> Result<PointCloud> {
    let sub = fps_resample(cloud, recipe.points, index as u64)?;
    let spec = AugmentationSpec {
        unit_sphere: recipe.augmentation.unit_sphere,
        ..AugmentationSpec::none()
    };
    augment(&sub, &spec, &mut ChaCha8Rng::seed_from_u64(0))
}

/// A test split tokenized once.
pub struct EvalSet {
    pub clouds: Vec<PointCloud>,
    pub sets: Vec<PatchSet>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn new(samples: &[&Sample], recipe: &TrainRecipe) -> Result<Self> {
        let clouds = samples
            .iter()
            .enumerate()
            .map(|(i, s)| eval_view(&s.cloud, recipe, i))
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..clouds.len() as u64).collect();
        let sets = tokenize_batch(&clouds, recipe.centers, recipe.group_size, &seeds)?;
        Ok(Self {
            sets,
            labels: samples.iter().map(|s| s.label).collect(),
            clouds,
        })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Optimizer, schedule, generator and counters of one fine-tuning run.
pub struct TrainState<T: Element> {
    pub recipe: TrainRecipe,
    pub optimizer: AdamW<T>,
    pub schedule: LrSchedule,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub step: u64,
    pub steps_per_epoch: u64,
}

impl<T: Element> TrainState<T> {
    pub fn new(recipe: TrainRecipe, train_len: usize, seed: u64) -> Result<Self> {
        recipe.validate()?;
        if train_len == 0 {
            return Err(Error::param("fine-tuning set is empty"));
        }
        let steps_per_epoch = train_len.div_ceil(recipe.batch_size) as u64;
        let schedule = LrSchedule::new(
            recipe.lr,
            recipe.warmup_epochs * steps_per_epoch,
            recipe.epochs * steps_per_epoch,
            recipe.min_lr,
        )?;
        Ok(Self {
            optimizer: AdamW::new(recipe.optimizer),
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            step: 0,
            steps_per_epoch,
            recipe,
        })
    }

    pub fn frozen(&self) -> bool {
        self.epoch < self.recipe.freeze_epochs
    }

    fn grad_mode(&self) -> EncoderGrad {
        if self.frozen() {
            EncoderGrad::Frozen
        } else {
            EncoderGrad::Train
        }
    }

    /// Shuffled mini-batches of sample indices for the next epoch.
    fn batches(&mut self, len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.recipe.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Resamples with a fresh FPS seed, augments, and tokenizes.
    fn prepare(&mut self, clouds: &[&PointCloud]) -> Result<(Vec<PointCloud>, Vec<PatchSet>)> {
        let r = &self.recipe;
        let views = clouds
            .iter()
            .map(|c| {
                let sub = fps_resample(c, r.points, self.rng.random())?;
                augment(&sub, &r.augmentation, &mut self.rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..views.len()).map(|_| self.rng.random()).collect();
        let sets = tokenize_batch(&views, r.centers, r.group_size, &seeds)?;
        Ok((views, sets))
    }

    fn apply(&mut self, loss: &Tensor<T>, params: &[(String, Tensor<T>)]) -> Result<f64> {
        let value = loss.item().as_f64();
        loss.backward()?;
        let lr = self
            .schedule
            .lr_at(self.step.min(self.schedule.total_steps))?;
        self.optimizer.step(params, lr)?;
        self.step += 1;
        Ok(value)
    }
}

fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let v = logits.value();
    let c = v.last_dim();
    v.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per-epoch progress of a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    /// Overall accuracy for classification, per-point accuracy for part
    /// segmentation.
    pub test_accuracy: f64,
}

pub struct ClassificationTrainer<T: Element> {
    pub model: Classifier<T>,
    pub state: TrainState<T>,
    pub label_smoothing: f64,
    pub classes: usize,
}

impl<T: Element> ClassificationTrainer<T> {
    /// `pretrained` selects the learning rate and whether the encoder is
    /// frozen at first; the head is always freshly initialized.
    pub fn new(
        mut encoder: PointEncoder<T>,
        classes: usize,
        config: &ClassificationConfig,
        pretrained: bool,
        train_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let recipe = config.recipe(pretrained);
        encoder.config.encoder.drop_path = recipe.drop_path;
        encoder.encoder.config.drop_path = recipe.drop_path;
        encoder.config.encoder.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let model = Classifier::new(
            encoder,
            &config.head_hidden,
            classes,
            config.head_dropout,
            &mut init,
        )?;
        Ok(Self {
            model,
            state: TrainState::new(recipe, train_len, seed)?,
            label_smoothing: config.label_smoothing,
            classes,
        })
    }

    fn params(&self) -> Vec<(String, Tensor<T>)> {
        if self.state.frozen() {
            self.model.head.named_params("head")
        } else {
            self.model.named_params("")
        }
    }

    /// One epoch over `train`; returns the mean loss.
    pub fn train_epoch(&mut self, train: &[&Sample]) -> Result<f64> {
        if let Some(s) = train.iter().find(|s| s.label >= self.classes) {
            return Err(Error::param(format!(
                "label {} outside {} classes",
                s.label, self.classes
            )));
        }
        let mut total = 0.0;
        let batches = self.state.batches(train.len());
        for idx in &batches {
            let step = self.state.step;
            let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &train[i].cloud).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let loss = (|| {
                let (_, sets) = self.state.prepare(&clouds)?;
                let grad = self.state.grad_mode();
                let logits =
                    self.model
                        .forward(&sets, grad, &mut ForwardCtx::train(&mut self.state.rng))?;
                let loss = label_smoothing_cross_entropy(&logits, &labels, self.label_smoothing)?;
                let params = self.params();
                self.state.apply(&loss, &params)
            })()
            .map_err(|e| e.at_step(step))?;
            total += loss;
        }
        self.state.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    pub fn predict(&self, sets: &[PatchSet]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(self.state.recipe.batch_size) {
            let logits = self
                .model
                .forward(chunk, EncoderGrad::Frozen, &mut ForwardCtx::eval())?;
            out.extend(argmax_rows(&logits));
        }
        Ok(out)
    }

    pub fn evaluate(&self, eval: &EvalSet) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_predictions(&self.predict(&eval.sets)?, &eval.labels, self.classes)
    }
}

/// Part labels seen per object class, sorted.
pub fn category_parts(samples: &[&Sample], classes: usize) -> Result<Vec<Vec<u32>>> {
    let mut parts = vec![Vec::new(); classes];
    for s in samples {
        let labels = s
            .cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::param("part segmentation sample without part labels"))?;
        if s.label >= classes {
            return Err(Error::param(format!(
                "object class {} out of range",
                s.label
            )));
        }
        parts[s.label].extend_from_slice(labels);
    }
    for p in &mut parts {
        p.sort_unstable();
        p.dedup();
    }
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartSegMetrics {
    pub point_accuracy: f64,
    #[serde(flatten)]
    pub iou: PartIou,
}

pub struct PartSegTrainer<T: Element> {
    pub model: Segmenter<T>,
    pub state: TrainState<T>,
    pub parts: usize,
    pub object_classes: usize,
}

impl<T: Element> PartSegTrainer<T> {
    pub fn new(
        mut encoder: PointEncoder<T>,
        object_classes: usize,
        parts: usize,
        config: &PartSegConfig,
        train_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let recipe = config.recipe();
        encoder.config.encoder.drop_path = recipe.drop_path;
        encoder.encoder.config.drop_path = recipe.drop_path;
        encoder.config.encoder.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let head = PartSegHead::new(
            encoder.config.dim(),
            config.propagation_dim,
            &config.head_hidden,
            object_classes,
            parts,
            config.head_dropout,
            &mut init,
        )?;
        Ok(Self {
            model: Segmenter::new(encoder, head)?,
            state: TrainState::new(recipe, train_len, seed)?,
            parts,
            object_classes,
        })
    }

    fn point_labels(cloud: &PointCloud, parts: usize) -> Result<Vec<usize>> {
        let labels = cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::param("part segmentation sample without part labels"))?;
        labels
            .iter()
            .map(|&l| {
                if (l as usize) < parts {
                    Ok(l as usize)
                } else {
                    Err(Error::param(format!(
                        "part label {l} outside {parts} parts"
                    )))
                }
            })
            .collect()
    }

    pub fn train_epoch(&mut self, train: &[&Sample]) -> Result<f64> {
        let mut total = 0.0;
        let batches = self.state.batches(train.len());
        for idx in &batches {
            let step = self.state.step;
            let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &train[i].cloud).collect();
            let objects: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let loss = (|| {
                let (views, sets) = self.state.prepare(&clouds)?;
                let mut labels = Vec::new();
                for v in &views {
                    labels.extend(Self::point_labels(v, self.parts)?);
                }
                let points: Vec<&[Point]> = views.iter().map(|v| v.points.as_slice()).collect();
                let logits = self.model.forward(
                    &sets,
                    &points,
                    &objects,
                    &mut ForwardCtx::train(&mut self.state.rng),
                )?;
                let logits = logits.reshape(vec![labels.len(), self.parts])?;
                let loss = label_smoothing_cross_entropy(&logits, &labels, 0.0)?;
                let params: Vec<_> = if self.state.frozen() {
                    self.model.head.named_params("head")
                } else {
                    self.model.named_params("")
                };
                self.state.apply(&loss, &params)
            })()
            .map_err(|e| e.at_step(step))?;
            total += loss;
        }
        self.state.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    /// Per-point predictions for every cloud of `eval`.
    pub fn predict(&self, eval: &EvalSet) -> Result<Vec<Vec<u32>>> {
        let mut out = Vec::with_capacity(eval.len());
        let bs = self.state.recipe.batch_size;
        for start in (0..eval.len()).step_by(bs) {
            let end = (start + bs).min(eval.len());
            let points: Vec<&[Point]> = eval.clouds[start..end]
                .iter()
                .map(|c| c.points.as_slice())
                .collect();
            let logits = self.model.forward(
                &eval.sets[start..end],
                &points,
                &eval.labels[start..end],
                &mut ForwardCtx::eval(),
            )?;
            let flat = argmax_rows(&logits);
            let p = points.first().map_or(0, |s| s.len());
            out.extend(
                flat.chunks(p.max(1))
                    .map(|c| c.iter().map(|&x| x as u32).collect()),
            );
        }
        Ok(out)
    }

    pub fn evaluate(&self, eval: &EvalSet, category_parts: &[Vec<u32>]) -> Result<PartSegMetrics> {
        let preds = self.predict(eval)?;
        let (mut correct, mut total) = (0usize, 0usize);
        let mut instances = Vec::with_capacity(preds.len());
        for ((pred, cloud), &cat) in preds.iter().zip(&eval.clouds).zip(&eval.labels) {
            let truth = cloud
                .labels
                .as_ref()
                .ok_or_else(|| Error::param("evaluation sample without part labels"))?;
            correct += pred.iter().zip(truth).filter(|(a, b)| a == b).count();
            total += truth.len();
            let parts = category_parts
                .get(cat)
                .ok_or_else(|| Error::param(format!("no part list for category {cat}")))?;
            instances.push((cat, instance_miou(pred, truth, parts)?));
        }
        Ok(PartSegMetrics {
            point_accuracy: correct as f64 / total.max(1) as f64,
            iou: aggregate_part_iou(&instances)?,
        })
    }
}

/// Query accuracy of `runs` independent episodes. Each episode fine-tunes
/// a copy of `encoder` with a new head on the support set.
pub fn fewshot_accuracies<T: Element>(
    encoder: &PointEncoder<T>,
    pool: &[&Sample],
    config: &ClassificationConfig,
    pretrained: bool,
    way: usize,
    shot: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accs = Vec::with_capacity(runs);
    for _ in 0..runs {
        let episode = sample_fewshot_episode(&labels, way, shot, &mut rng)?;
        let relabel = |set: &[(usize, usize)]| -> Vec<Sample> {
            set.iter()
                .map(|&(i, l)| Sample {
                    cloud: pool[i].cloud.clone(),
                    label: l,
                    split: pool[i].split,
                })
                .collect()
        };
        let support = relabel(&episode.support);
        let query = relabel(&episode.query);
        let support: Vec<&Sample> = support.iter().collect();
        let query: Vec<&Sample> = query.iter().collect();
        let mut trainer = ClassificationTrainer::new(
            encoder.tracked_copy(),
            way,
            config,
            pretrained,
            support.len(),
            rng.random(),
        )?;
        for _ in 0..config.epochs {
            trainer.train_epoch(&support)?;
        }
        let eval = EvalSet::new(&query, &trainer.state.recipe)?;
        accs.push(trainer.evaluate(&eval)?.accuracy());
    }
    Ok(accs)
}
