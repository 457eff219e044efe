//! Task heads, fine-tuning loops, and evaluation protocols.

mod fewshot;
mod finetune;
mod heads;
mod metrics;
mod pca;
mod transfer;

pub use fewshot::{mean_std, sample_fewshot_episode, FewShotEpisode, QUERIES_PER_CLASS};
pub use finetune::{
    category_parts, eval_view, fewshot_accuracies, ClassificationConfig, ClassificationTrainer,
    EpochLog, EvalSet, PartSegConfig, PartSegMetrics, PartSegTrainer, TrainRecipe, TrainState,
};
pub use heads::{
    classify_forward, mean_max_pool, partseg_forward, Classifier, EncoderGrad, HiddenLayer,
    MlpHead, PartSegHead, Segmenter, PARTSEG_BLOCKS,
};
pub use metrics::{aggregate_part_iou, instance_miou, ConfusionMatrix, PartIou};
pub use pca::{covariance, pca_rgb, top_eigenpairs};
pub use transfer::{
    load_classifier, load_pretrained_encoder, save_classifier, ClassifierMeta, PretrainedEncoder,
    CLASSIFIER_KIND,
};
