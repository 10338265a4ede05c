//! Episodic evaluation harness: run configuration, paired-episode protocol,
//! confidence intervals, block-count ablation and report files.

mod config;
mod protocol;
mod report;

pub use config::{DatasetSource, MethodKind, ReplaceParams, RunConfig, CONFIG_KEYS};
pub use protocol::{
    ablation_grid, backbone_for, ci95, episode_rng, load_splits, run_protocol, synthetic_splits,
    train_for_run, training_rng, AblationMatrix, EpisodeRecord, ProtocolOutput, Summary,
};
pub use report::{
    format_ablation, format_table, read_csv, write_csv, write_embeddings, write_report,
    EpisodeRow, ReportPaths, SummaryRow,
};
