//! Backbone training and per-episode fine-tuning.

mod finetune;
mod train;

pub use finetune::{
    embed_episode, evaluate_episode, evaluate_features, finetune, pseudo_label, select_sources,
    synthesize_support, EpisodeFeatures, EpochTrace, FinetuneConfig, FinetuneOutcome,
    PseudoLabeledPool, TraceOptions, Variant,
};
pub use train::{
    build_augmented_trainset, train_backbone, TrainConfig, TrainReport, TrainedBackbone,
};
