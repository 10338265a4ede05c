use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Episode, EpisodeSample, OracleAccess, UnlabeledSet};
use crate::error::{config, usage, Error, Result};
use crate::model::{argmax_rows, Head, HeadKind, ModelState};
use crate::numerics::{sgd_step, softmax_cross_entropy, Tensor};
use crate::replacement::{apply_replacement, ReplacementMethod, ReplacementOutcome};

/// Fine-tune strategy: the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Tune on the original support set only.
    Vanilla,
    /// One-time local replacement: donors chosen once after the first epoch, then reused.
    Otlr,
    /// Continual replacement with donors drawn uniformly from all unlabeled images.
    ClrNoPl,
    /// Continual replacement with donors chosen by the hidden true labels.
    ClrGt,
    /// Whole unlabeled images with their pseudo labels added to the support set.
    Car,
    /// Continual local replacement with pseudo-label donor selection.
    Clr,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vanilla,
        Variant::Otlr,
        Variant::ClrNoPl,
        Variant::ClrGt,
        Variant::Car,
        Variant::Clr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vanilla => "Vanilla",
            Variant::Otlr => "OTLR",
            Variant::ClrNoPl => "CLR_no_PL",
            Variant::ClrGt => "CLR_GT",
            Variant::Car => "CAR",
            Variant::Clr => "CLR",
        }
    }

    /// Whether the variant uses the unlabeled set at all.
    pub fn uses_unlabeled(&self) -> bool {
        !matches!(self, Variant::Vanilla)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match key.as_str() {
            "vanilla" => Variant::Vanilla,
            "otlr" => Variant::Otlr,
            "clr_no_pl" | "clr_wo_pl" => Variant::ClrNoPl,
            "clr_gt" | "clr_w_gt" => Variant::ClrGt,
            "car" => Variant::Car,
            "clr" => Variant::Clr,
            _ => return config(format!("unknown variant {s:?}")),
        })
    }
}

/// Episode fine-tune hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Mini-batch size; `None` trains on the whole epoch set in one step.
    pub batch_size: Option<usize>,
    /// Operator applied to support images.
    pub method: ReplacementMethod,
    /// `Cosine` means a cosine head initialized by imprinting.
    pub head: HeadKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Clr,
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: None,
            method: ReplacementMethod::block_aug(6),
            head: HeadKind::Linear,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config("fine-tune needs at least one epoch");
        }
        if self.batch_size == Some(0) {
            return config("fine-tune batch size must be positive");
        }
        self.method.validate()
    }
}

/// Frozen-backbone features of one episode, computed once.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures {
    pub support: Tensor,
    pub query: Tensor,
    pub unlabeled: Option<Tensor>,
}

const EMBED_CHUNK: usize = 64;

pub fn embed_episode(model: &ModelState, episode: &Episode) -> Result<EpisodeFeatures> {
    let bb = model.backbone();
    Ok(EpisodeFeatures {
        support: bb.embed_chunked(&episode.support_images()?, EMBED_CHUNK)?,
        query: bb.embed_chunked(&episode.query_images()?, EMBED_CHUNK)?,
        unlabeled: episode
            .unlabeled_images()?
            .map(|u| bb.embed_chunked(&u, EMBED_CHUNK))
            .transpose()?,
    })
}

/// Current pseudo labels `ỹ` of the unlabeled images (episode-local class indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabeledPool {
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl PseudoLabeledPool {
    pub fn from_labels(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return usage(format!("pseudo label {bad} outside [0, {classes})"));
        }
        Ok(Self { labels, classes })
    }

    /// Indices of unlabeled images currently assigned to `class`.
    pub fn members(&self, class: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }
}

/// Argmax predictions of `head` over cached unlabeled features.
pub fn pseudo_label(head: &Head, unlabeled_features: &Tensor) -> Result<PseudoLabeledPool> {
    let labels = head.predict(unlabeled_features)?;
    PseudoLabeledPool::from_labels(labels, head.classes())
}

/// For each support label, a donor drawn uniformly among unlabeled images whose pool
/// label matches; `None` when no image matches.
pub fn select_sources(
    support_labels: &[usize],
    pool: &PseudoLabeledPool,
    rng: &mut impl Rng,
) -> Vec<Option<usize>> {
    let by_class: Vec<Vec<usize>> = (0..pool.classes).map(|c| pool.members(c)).collect();
    support_labels
        .iter()
        .map(|&c| {
            let candidates = by_class.get(c)?;
            if candidates.is_empty() {
                None
            } else {
                Some(candidates[rng.random_range(0..candidates.len())])
            }
        })
        .collect()
}

/// Locally replaces each support image by its donor; images without a donor pass through
/// (`None` in the output).
pub fn synthesize_support(
    support: &[EpisodeSample],
    unlabeled: &UnlabeledSet,
    donors: &[Option<usize>],
    method: &ReplacementMethod,
    rng: &mut impl Rng,
) -> Result<Vec<Option<ReplacementOutcome>>> {
    if donors.len() != support.len() {
        return usage("one donor slot per support image required");
    }
    support
        .iter()
        .zip(donors)
        .map(|(s, d)| {
            d.map(|j| {
                let donor = unlabeled
                    .images()
                    .get(j)
                    .ok_or_else(|| Error::Usage(format!("donor {j} outside unlabeled set")))?;
                apply_replacement(&s.pixels, &donor.pixels, donor.id, method, rng)
            })
            .transpose()
        })
        .collect()
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub loss: f32,
    /// Agreement of the pseudo labels used for this epoch with the hidden truth.
    pub pseudo_label_accuracy: Option<f32>,
    pub query_accuracy: f32,
    /// Support images that were locally replaced for this epoch.
    pub replaced: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head: Head,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f32>,
    pub trace: Vec<EpochTrace>,
}

/// Optional per-epoch tracing. Pseudo-label accuracy needs oracle access.
#[derive(Debug, Default)]
pub struct TraceOptions<'a> {
    pub enabled: bool,
    pub oracle: Option<&'a OracleAccess>,
}

/// The set trained on in one epoch: features plus episode-local labels.
struct EpochSet {
    features: Tensor,
    labels: Vec<usize>,
    replaced: usize,
    pseudo: Option<PseudoLabeledPool>,
}

/// Tunes a new head on a frozen backbone for one episode.
///
/// Epoch 1 trains on the original support set. Between epochs the variant decides
/// what the next epoch trains on; the backbone is never touched.
pub fn finetune(
    model: &ModelState,
    episode: &Episode,
    features: &EpisodeFeatures,
    config: &FinetuneConfig,
    rng: &mut impl Rng,
    trace: TraceOptions<'_>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if !model.is_frozen() {
        return usage("fine-tuning requires a frozen backbone");
    }
    let n = episode.spec.n;
    let d = model.backbone().embedding_dim();
    let support_labels = episode.support_labels();
    let query_labels = episode.query_labels();

    // Independent streams keep variants paired on head init and batching.
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut donor_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let mut variant = config.variant;
    let unlabeled_feats = match (&features.unlabeled, variant.uses_unlabeled()) {
        (Some(f), true) => Some(f),
        (None, true) => {
            log::warn!("{variant}: episode has no unlabeled images, running as Vanilla");
            variant = Variant::Vanilla;
            None
        }
        _ => None,
    };

    let mut head = Head::new(config.head, n, d, &mut init_rng)?;
    if config.head == HeadKind::Cosine {
        head.imprint(&features.support, &support_labels)?;
    }

    let original = EpochSet {
        features: features.support.clone(),
        labels: support_labels.clone(),
        replaced: 0,
        pseudo: None,
    };
    let mut current = EpochSet {
        features: original.features.clone(),
        labels: original.labels.clone(),
        replaced: 0,
        pseudo: None,
    };
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut traces = Vec::new();

    for epoch in 1..=config.epochs {
        let loss = optimize_epoch(&mut head, &current, config, &mut batch_rng)?;
        epoch_losses.push(loss);
        if trace.enabled {
            let pseudo_label_accuracy = match (&current.pseudo, trace.oracle) {
                (Some(pool), Some(access)) => {
                    let truth = episode.unlabeled.true_labels(access);
                    Some(agreement(&pool.labels, truth))
                }
                _ => None,
            };
            traces.push(EpochTrace {
                epoch,
                loss,
                pseudo_label_accuracy,
                query_accuracy: evaluate_features(&head, &features.query, &query_labels)? as f32,
                replaced: current.replaced,
            });
        }
        if epoch == config.epochs {
            break;
        }
        let Some(unl) = unlabeled_feats else {
            continue;
        };
        let donors_from = |pool: &PseudoLabeledPool, rng: &mut ChaCha8Rng| {
            select_sources(&support_labels, pool, rng)
        };
        match variant {
            Variant::Vanilla => {}
            Variant::Otlr if epoch > 1 => {}
            Variant::Clr | Variant::Otlr => {
                let pool = pseudo_label(&head, unl)?;
                let donors = donors_from(&pool, &mut donor_rng);
                current = replaced_set(model, episode, &original, &donors, config, &mut donor_rng)?;
                current.pseudo = Some(pool);
            }
            Variant::ClrNoPl => {
                let m = episode.unlabeled.len();
                let donors: Vec<Option<usize>> = support_labels
                    .iter()
                    .map(|_| Some(donor_rng.random_range(0..m)))
                    .collect();
                current = replaced_set(model, episode, &original, &donors, config, &mut donor_rng)?;
            }
            Variant::ClrGt => {
                let access = OracleAccess::acquire();
                let truth = episode.unlabeled.true_labels(&access).to_vec();
                let pool = PseudoLabeledPool::from_labels(truth, n)?;
                let donors = donors_from(&pool, &mut donor_rng);
                current = replaced_set(model, episode, &original, &donors, config, &mut donor_rng)?;
            }
            Variant::Car => {
                let pool = pseudo_label(&head, unl)?;
                let all = Tensor::stack(
                    (0..original.features.batch())
                        .map(|i| original.features.row(i))
                        .chain((0..unl.batch()).map(|i| unl.row(i)))
                        .map(|row| Tensor::new(vec![d], row.to_vec()))
                        .collect::<Result<Vec<_>>>()?
                        .iter(),
                )?;
                let mut labels = original.labels.clone();
                labels.extend(&pool.labels);
                current = EpochSet {
                    features: all,
                    labels,
                    replaced: 0,
                    pseudo: Some(pool),
                };
            }
        }
    }
    Ok(FinetuneOutcome {
        head,
        epoch_losses,
        trace: traces,
    })
}

fn agreement(a: &[usize], b: &[usize]) -> f32 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f32 / a.len() as f32
}

/// Builds `d_support^s` features: replaced images are re-embedded, untouched ones reuse
/// the cached support features.
fn replaced_set(
    model: &ModelState,
    episode: &Episode,
    original: &EpochSet,
    donors: &[Option<usize>],
    config: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<EpochSet> {
    let outcomes = synthesize_support(&episode.support, &episode.unlabeled, donors, &config.method, rng)?;
    let changed: Vec<(usize, &ReplacementOutcome)> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.as_ref().filter(|o| !o.is_unchanged()).map(|o| (i, o)))
        .collect();
    let mut features = original.features.clone();
    if !changed.is_empty() {
        let images = Tensor::stack(changed.iter().map(|(_, o)| &o.image))?;
        let fresh = model.backbone().embed_chunked(&images, EMBED_CHUNK)?;
        for (row, (i, _)) in changed.iter().enumerate() {
            features.row_mut(*i).copy_from_slice(fresh.row(row));
        }
    }
    Ok(EpochSet {
        features,
        labels: original.labels.clone(),
        replaced: changed.len(),
        pseudo: None,
    })
}

fn optimize_epoch(
    head: &mut Head,
    set: &EpochSet,
    config: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<f32> {
    let total = set.labels.len();
    let batch = config.batch_size.unwrap_or(total).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    if batch < total {
        order.shuffle(rng);
    }
    let mut loss_sum = 0.0f64;
    for chunk in order.chunks(batch) {
        let (feats, labels) = if chunk.len() == total && batch == total {
            (set.features.clone(), set.labels.clone())
        } else {
            (
                set.features.select_rows(chunk),
                chunk.iter().map(|&i| set.labels[i]).collect(),
            )
        };
        let logits = head.logits(&feats)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("fine-tune loss became {loss}")));
        }
        loss_sum += loss as f64 * chunk.len() as f64;
        head.backward(&feats, &dlogits)?;
        sgd_step(head.params_mut(), config.lr, config.momentum, config.weight_decay);
    }
    Ok((loss_sum / total as f64) as f32)
}

/// Fraction of query features classified correctly.
pub fn evaluate_features(head: &Head, query: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(&head.logits(query)?);
    if pred.len() != labels.len() || labels.is_empty() {
        return usage("one label per query feature required");
    }
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Fraction of the episode's query set predicted correctly (episode-local labels).
pub fn evaluate_episode(model: &ModelState, head: &Head, episode: &Episode) -> Result<f64> {
    let feats = model.backbone().embed_chunked(&episode.query_images()?, EMBED_CHUNK)?;
    evaluate_features(head, &feats, &episode.query_labels())
}

