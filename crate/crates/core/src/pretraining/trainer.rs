use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, PretrainConfig};
use super::ema::{ema_decay_at, ema_update};
use super::mask::{generate_mask, MaskLayout};
use super::model::PretrainModel;
use crate::backbone::ForwardCtx;
use crate::checkpoint::Checkpoint;
use crate::data::make_pretrain_sample;
use crate::error::{Error, Result};
use crate::geometry::{tokenize_batch, PatchSet, PointCloud};
use crate::model::ModelConfig;
use crate::numerics::{AdamW, AdamWState, DType, Element, LrSchedule, Moments};

pub const PRETRAIN_KIND: &str = "pretrain";

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str = "step\tepoch\tlr\ttau\tloss";
}

impl fmt::Display for StepRecord {
    /// One tab-separated log line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:e}\t{}\t{}",
            self.step, self.epoch, self.lr, self.tau, self.loss
        )
    }
}

/// Owns every piece of mutable pretraining state.
pub struct Pretrainer<T: Element> {
    pub config: PretrainConfig,
    pub model: PretrainModel<T>,
    pub optimizer: AdamW<T>,
    pub schedule: LrSchedule,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub steps_per_epoch: u64,
}

impl<T: Element> Pretrainer<T> {
    /// `dataset_len` fixes the number of steps per epoch, which the
    /// learning-rate and EMA schedules are expressed in.
    pub fn new(
        model_config: ModelConfig,
        config: PretrainConfig,
        dataset_len: usize,
        seed: u64,
    ) -> Result<Self> {
        model_config.validate()?;
        config.validate(model_config.encoder.depth)?;
        if dataset_len == 0 {
            return Err(Error::param("pretraining dataset is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model =
            PretrainModel::new(model_config, config.mode, config.decoder_depth(), &mut rng)?;
        let steps_per_epoch = dataset_len.div_ceil(config.batch_size()) as u64;
        Self::assemble(config, model, rng, steps_per_epoch)
    }

    fn assemble(
        config: PretrainConfig,
        model: PretrainModel<T>,
        rng: ChaCha8Rng,
        steps_per_epoch: u64,
    ) -> Result<Self> {
        let schedule = LrSchedule::new(
            config.lr(),
            config.warmup_epochs * steps_per_epoch,
            config.epochs * steps_per_epoch,
            config.min_lr,
        )?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer),
            config,
            model,
            schedule,
            rng,
            step: 0,
            epoch: 0,
            steps_per_epoch,
        })
    }

    pub fn ema_warmup_steps(&self) -> u64 {
        self.config.ema.warmup_epochs * self.steps_per_epoch
    }

    pub fn tau_at(&self, step: u64) -> f64 {
        let e = &self.config.ema;
        ema_decay_at(step, e.tau_start, e.tau_end, self.ema_warmup_steps())
    }

    pub fn sample_masks(&mut self, sets: &[PatchSet]) -> Result<Vec<MaskLayout>> {
        sets.iter()
            .map(|s| {
                generate_mask(
                    &s.centers,
                    self.config.mask_strategy,
                    self.config.mask_ratio,
                    &mut self.rng,
                )
            })
            .collect()
    }

    /// One optimization step on an already tokenized batch; masks are drawn
    /// from the trainer's generator.
    pub fn step_on(&mut self, sets: &[PatchSet]) -> Result<StepRecord> {
        let step = self.step;
        self.step_inner(sets).map_err(|e| e.at_step(step))
    }

    /// One optimization step with caller-chosen masks.
    pub fn step_with_masks(
        &mut self,
        sets: &[PatchSet],
        layouts: &[MaskLayout],
    ) -> Result<StepRecord> {
        let step = self.step;
        self.apply_step(sets, layouts).map_err(|e| e.at_step(step))
    }

    fn step_inner(&mut self, sets: &[PatchSet]) -> Result<StepRecord> {
        if sets.is_empty() {
            return Err(Error::param("empty batch"));
        }
        let layouts = self.sample_masks(sets)?;
        self.apply_step(sets, &layouts)
    }

    fn apply_step(&mut self, sets: &[PatchSet], layouts: &[MaskLayout]) -> Result<StepRecord> {
        if sets.len() != layouts.len() {
            return Err(Error::param("one mask layout per sample required"));
        }
        let out = {
            let mut ctx = ForwardCtx::train(&mut self.rng);
            self.model.forward(
                sets,
                layouts,
                self.config.target_layers,
                self.config.smooth_l1_beta,
                &mut ctx,
            )?
        };
        let loss = out.loss.item().as_f64();
        out.loss.backward()?;
        let lr = self
            .schedule
            .lr_at(self.step.min(self.schedule.total_steps))?;
        self.optimizer.step(&self.model.trainable_params(), lr)?;
        let tau = self.tau_at(self.step);
        ema_update(&self.model.teacher, &self.model.student, tau)?;
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            tau,
            loss,
        };
        self.step += 1;
        Ok(record)
    }

    /// Resamples, augments and tokenizes `clouds` with fresh seeds.
    pub fn prepare_batch(&mut self, clouds: &[&PointCloud]) -> Result<Vec<PatchSet>> {
        let c = &self.config;
        let samples = clouds
            .iter()
            .map(|cloud| make_pretrain_sample(cloud, c.points, &c.augmentation, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..samples.len()).map(|_| self.rng.random()).collect();
        tokenize_batch(&samples, c.centers, c.group_size, &seeds)
    }

    /// Snapshot of everything needed to continue training bit-exactly.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = &self.optimizer.state;
        let meta = PretrainMeta {
            kind: PRETRAIN_KIND.into(),
            dtype: T::DTYPE,
            mode: self.config.mode,
            model: self.model.student.config,
            pretrain: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            steps_per_epoch: self.steps_per_epoch,
            optimizer_steps: state.t,
            moment_steps: state
                .moments
                .iter()
                .map(|(k, m)| (k.clone(), m.step))
                .collect(),
            rng: self.rng.clone(),
        };
        let mut ckpt = Checkpoint::new(&meta)?;
        ckpt.insert_module("", &self.model)?;
        for (name, m) in &state.moments {
            ckpt.insert(format!("optim.m.{name}"), &m.m)?;
            ckpt.insert(format!("optim.v.{name}"), &m.v)?;
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: PretrainMeta = ckpt.meta()?;
        if meta.kind != PRETRAIN_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a pretraining checkpoint, found `{}`",
                meta.kind
            )));
        }
        if meta.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {:?} weights, expected {:?}",
                meta.dtype,
                T::DTYPE
            )));
        }
        if meta.mode != meta.pretrain.mode {
            return Err(Error::Checkpoint(
                "metadata mode disagrees with its config".into(),
            ));
        }
        meta.model.validate()?;
        meta.pretrain.validate(meta.model.encoder.depth)?;
        // weights are overwritten below; the init generator is throwaway
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let model = PretrainModel::new(
            meta.model,
            meta.mode,
            meta.pretrain.decoder_depth(),
            &mut init,
        )?;
        ckpt.load_module("", &model)?;
        let mut trainer = Self::assemble(meta.pretrain, model, meta.rng, meta.steps_per_epoch)?;
        let params: BTreeMap<String, Vec<usize>> = trainer
            .model
            .trainable_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let mut moments = BTreeMap::new();
        for (name, step) in meta.moment_steps {
            let shape = params.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`"))
            })?;
            moments.insert(
                name.clone(),
                Moments {
                    m: ckpt.array(&format!("optim.m.{name}"), Some(shape))?,
                    v: ckpt.array(&format!("optim.v.{name}"), Some(shape))?,
                    step,
                },
            );
        }
        trainer.optimizer.state = AdamWState {
            moments,
            t: meta.optimizer_steps,
        };
        trainer.step = meta.step;
        trainer.epoch = meta.epoch;
        Ok(trainer)
    }

    /// One pass over `clouds` in a freshly shuffled order; `on_step` sees
    /// every log record.
    pub fn run_epoch(
        &mut self,
        clouds: &[PointCloud],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<f64> {
        if clouds.is_empty() {
            return Err(Error::param("pretraining dataset is empty"));
        }
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(self.config.batch_size()) {
            let batch: Vec<&PointCloud> = chunk.iter().map(|&i| &clouds[i]).collect();
            let step = self.step;
            let sets = self.prepare_batch(&batch).map_err(|e| e.at_step(step))?;
            let record = self.step_on(&sets)?;
            on_step(&record)?;
            total += record.loss;
            count += 1;
        }
        self.epoch += 1;
        Ok(total / count as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainMeta {
    pub kind: String,
    pub dtype: DType,
    pub mode: Mode,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub steps_per_epoch: u64,
    pub optimizer_steps: u64,
    pub moment_steps: BTreeMap<String, u64>,
    pub rng: ChaCha8Rng,
}
