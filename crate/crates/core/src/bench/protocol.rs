use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{
    load_dataset, make_synthetic_dataset, sample_episode, DatasetSplits, EpisodeSpec,
    LabeledDataset, Split, SyntheticSpec,
};
use crate::error::{usage, Result};
use crate::model::{BackboneConfig, ModelState};
use crate::pipeline::{
    embed_episode, evaluate_features, finetune, train_backbone, EpochTrace, TraceOptions,
    TrainReport, Variant,
};

use super::config::{DatasetSource, RunConfig};
use crate::data::OracleAccess;

/// Stream reserved for backbone training; episode `e` uses stream `e`.
const TRAIN_STREAM: u64 = u64::MAX;

/// The RNG of episode `e` under `master_seed`.
pub fn episode_rng(master_seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(episode);
    rng
}

pub fn training_rng(master_seed: u64) -> ChaCha8Rng {
    episode_rng(master_seed, TRAIN_STREAM)
}

/// Splits a synthetic dataset by class: the last quarter (rounded up) is the test split.
/// The validation split is empty.
pub fn synthetic_splits(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    let all = make_synthetic_dataset(spec.classes, spec.per_class, spec.side, spec.seed)?;
    let test_classes = spec.classes.div_ceil(4).min(spec.classes - 1);
    let cut = spec.classes - test_classes;
    let classes: Vec<usize> = all.classes().collect();
    Ok(DatasetSplits {
        train: all.subset(Split::Train, &classes[..cut])?,
        val: all.subset(Split::Val, &[])?,
        test: all.subset(Split::Test, &classes[cut..])?,
    })
}

pub fn load_splits(cfg: &RunConfig) -> Result<DatasetSplits> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => synthetic_splits(spec),
        DatasetSource::Directory { root, split_file } => {
            load_dataset(root, split_file, cfg.image_side)
        }
    }
}

/// Conv-4 sized to the training images.
pub fn backbone_for(dataset: &LabeledDataset) -> Result<BackboneConfig> {
    let Some(&[c, h, w]) = dataset.image_shape() else {
        return usage("training split is empty");
    };
    if h != w {
        return usage(format!("square images required, got {h}×{w}"));
    }
    Ok(BackboneConfig::conv4(c, h))
}

/// Trains the backbone of a run and freezes it.
pub fn train_for_run(cfg: &RunConfig, train: &LabeledDataset) -> Result<(ModelState, TrainReport)> {
    let trained = train_backbone(
        train,
        backbone_for(train)?,
        &cfg.train_config(),
        &mut training_rng(cfg.seed),
    )?;
    let mut model = trained.model;
    model.freeze_backbone();
    Ok((model, trained.report))
}

/// Outcome of one variant on one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_index: usize,
    pub variant: Variant,
    pub accuracy: f64,
    pub epoch_losses: Vec<f32>,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
    /// Hidden-label reads performed while this variant ran.
    pub oracle_reads: usize,
    pub trace: Vec<EpochTrace>,
}

/// Per-variant aggregate; accuracies in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub variant: Variant,
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub seed: u64,
    /// Episode-ordered accuracy fractions.
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub summaries: Vec<Summary>,
    /// Sorted by episode index, then by the configured variant order.
    pub records: Vec<EpisodeRecord>,
}

impl ProtocolOutput {
    pub fn summary(&self, variant: Variant) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn records_of(&self, variant: Variant) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter(move |r| r.variant == variant)
    }
}

/// `1.96 · s / √N` with the N−1 sample standard deviation.
pub fn ci95(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return usage(format!("ci95 needs at least two values, got {n}"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(1.96 * var.sqrt() / (n as f64).sqrt())
}

fn run_episode(
    model: &ModelState,
    test: &LabeledDataset,
    cfg: &RunConfig,
    index: usize,
) -> Result<Vec<EpisodeRecord>> {
    let mut rng = episode_rng(cfg.seed, index as u64);
    let episode = sample_episode(test, cfg.episode, &mut rng)?;
    let finetune_seed: u64 = rng.random();
    let features = embed_episode(model, &episode)?;
    let query_labels = episode.query_labels();
    let oracle = cfg.trace.then(OracleAccess::acquire);

    let mut out = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let before = model.backbone_checksum();
        episode.unlabeled.reset_oracle_reads();
        let outcome = finetune(
            model,
            &episode,
            &features,
            &cfg.finetune_config(variant),
            &mut ChaCha8Rng::seed_from_u64(finetune_seed),
            TraceOptions {
                enabled: cfg.trace,
                oracle: None,
            },
        )?;
        // Oracle reads from the run itself are what the audit counts, so the trace's
        // pseudo-label agreement is computed afterwards and never inside the method.
        let oracle_reads = episode.unlabeled.oracle_reads();
        let mut trace = outcome.trace;
        if let (Some(access), false) = (&oracle, trace.is_empty()) {
            annotate_trace(&mut trace, &episode, &features, model, cfg, variant, finetune_seed, access)?;
        }
        out.push(EpisodeRecord {
            episode_index: index,
            variant,
            accuracy: evaluate_features(&outcome.head, &features.query, &query_labels)?,
            epoch_losses: outcome.epoch_losses,
            backbone_checksum_before: before,
            backbone_checksum_after: model.backbone_checksum(),
            oracle_reads,
            trace,
        });
    }
    Ok(out)
}

/// Re-runs the variant with oracle access so the trace carries pseudo-label agreement.
#[allow(clippy::too_many_arguments)]
fn annotate_trace(
    trace: &mut [EpochTrace],
    episode: &crate::data::Episode,
    features: &crate::pipeline::EpisodeFeatures,
    model: &ModelState,
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    access: &OracleAccess,
) -> Result<()> {
    let annotated = finetune(
        model,
        episode,
        features,
        &cfg.finetune_config(variant),
        &mut ChaCha8Rng::seed_from_u64(seed),
        TraceOptions {
            enabled: true,
            oracle: Some(access),
        },
    )?;
    for (t, a) in trace.iter_mut().zip(annotated.trace) {
        t.pseudo_label_accuracy = a.pseudo_label_accuracy;
    }
    Ok(())
}

/// Evaluates every configured variant on `cfg.episodes` paired episodes drawn from `test`.
///
/// Episode `e` is sampled from its own RNG stream, and every variant replays it with the
/// same fine-tune seed. Episodes run in parallel; results are gathered by index.
pub fn run_protocol(model: &ModelState, test: &LabeledDataset, cfg: &RunConfig) -> Result<ProtocolOutput> {
    cfg.validate()?;
    if !model.is_frozen() {
        return usage("the protocol needs a trained, frozen backbone");
    }
    let per_episode: Vec<Vec<EpisodeRecord>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| run_episode(model, test, cfg, e))
        .collect::<Result<_>>()?;
    let records: Vec<EpisodeRecord> = per_episode.into_iter().flatten().collect();

    let mut by_variant: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    for r in &records {
        by_variant.entry(r.variant).or_default().push(r.accuracy);
    }
    let summaries = cfg
        .variants
        .iter()
        .map(|&v| summarize(v, by_variant[&v].clone(), cfg))
        .collect::<Result<_>>()?;
    Ok(ProtocolOutput { summaries, records })
}

fn summarize(variant: Variant, accuracies: Vec<f64>, cfg: &RunConfig) -> Result<Summary> {
    let n = accuracies.len();
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let ci = if n >= 2 { ci95(&accuracies)? } else { 0.0 };
    Ok(Summary {
        variant,
        spec: cfg.episode,
        episodes: n,
        mean_acc: 100.0 * mean,
        ci95: 100.0 * ci,
        seed: cfg.seed,
        accuracies,
    })
}

/// Summaries for every (training cap, fine-tune cap) pair, evaluated with CLR.
#[derive(Debug, Clone)]
pub struct AblationMatrix {
    pub train_blocks: Vec<usize>,
    pub finetune_blocks: Vec<usize>,
    /// `cells[i][j]` pairs `train_blocks[i]` with `finetune_blocks[j]`.
    pub cells: Vec<Vec<Summary>>,
}

/// Trains one backbone per training cap and evaluates CLR with every fine-tune cap.
pub fn ablation_grid(
    train_blocks: &[usize],
    finetune_blocks: &[usize],
    cfg: &RunConfig,
    splits: &DatasetSplits,
) -> Result<AblationMatrix> {
    if train_blocks.is_empty() || finetune_blocks.is_empty() {
        return usage("ablation grid needs at least one block count per axis");
    }
    let mut cells = Vec::with_capacity(train_blocks.len());
    for &tb in train_blocks {
        let mut train_cfg = cfg.clone();
        train_cfg.train_max_blocks = tb;
        train_cfg.validate()?;
        let (model, _) = train_for_run(&train_cfg, &splits.train)?;
        let mut row = Vec::with_capacity(finetune_blocks.len());
        for &fb in finetune_blocks {
            let mut cell_cfg = train_cfg.clone();
            cell_cfg.finetune_max_blocks = fb;
            cell_cfg.variants = vec![Variant::Clr];
            let out = run_protocol(&model, &splits.test, &cell_cfg)?;
            log::info!(
                "ablation train {tb} / fine-tune {fb}: {:.2} ± {:.2}",
                out.summaries[0].mean_acc,
                out.summaries[0].ci95
            );
            row.push(out.summaries.into_iter().next().expect("one variant"));
        }
        cells.push(row);
    }
    Ok(AblationMatrix {
        train_blocks: train_blocks.to_vec(),
        finetune_blocks: finetune_blocks.to_vec(),
        cells,
    })
}
