use point2vec::pretraining::StepRecord;
use point2vec::{Checkpoint, PointCloud, Pretrainer, Result, Split};
use serde::Serialize;

use crate::output::{write_json, TsvLog};
use crate::run::Run;

pub const LOG_FILE: &str = "pretrain.tsv";
pub const FINAL_CHECKPOINT: &str = "pretrain.p2vc";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("pretrain_epoch{epoch:04}.p2vc")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub mode: &'static str,
    pub epochs: u64,
    pub steps: u64,
    /// Mean loss of each epoch run by this invocation.
    pub epoch_losses: Vec<f64>,
}

/// Runs (or resumes) pretraining on the training split up to the configured
/// epoch count. Checkpoints land in `run.out` every `save_every` epochs and
/// at the end; every step is appended to the log.
pub fn pretrain(
    run: &Run,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(u64, f64),
) -> Result<PretrainSummary> {
    let dataset = run.dataset()?;
    let clouds: Vec<PointCloud> = run
        .split(&dataset, Split::Train)?
        .iter()
        .map(|s| s.cloud.clone())
        .collect();
    let mut trainer = match resume {
        Some(ckpt) => Pretrainer::<f32>::from_checkpoint(ckpt)?,
        None => Pretrainer::new(
            run.config.model,
            run.config.pretrain.clone(),
            clouds.len(),
            run.seed,
        )?,
    };
    let mut log = TsvLog::open(&run.path(LOG_FILE), StepRecord::TSV_HEADER)?;
    let mut epoch_losses = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let loss = trainer.run_epoch(&clouds, |r| log.row(r))?;
        on_epoch(trainer.epoch, loss);
        epoch_losses.push(loss);
        if trainer.epoch % trainer.config.save_every == 0 {
            trainer
                .checkpoint()?
                .save(&run.path(&epoch_checkpoint_name(trainer.epoch)))?;
        }
    }
    trainer.checkpoint()?.save(&run.path(FINAL_CHECKPOINT))?;
    let summary = PretrainSummary {
        mode: trainer.config.mode.name(),
        epochs: trainer.epoch,
        steps: trainer.step,
        epoch_losses,
    };
    write_json(&run.path("pretrain.json"), &summary)?;
    Ok(summary)
}
