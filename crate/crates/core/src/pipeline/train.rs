use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{ImageSample, LabeledDataset, Split};
use crate::error::{config, Error, Result};
use crate::model::{Backbone, BackboneConfig, Head, HeadKind, ModelState};
use crate::numerics::{sgd_step, softmax_cross_entropy, Tensor};
use crate::replacement::{synthesize_training_image, ReplacementMethod};

/// Backbone training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Operator used to build the augmented copy of the training set.
    pub method: ReplacementMethod,
    /// Rebuild the augmented copy before every epoch instead of once.
    pub regenerate_augmented_per_epoch: bool,
    /// Throwaway head used during training; cosine for the imprinting variant.
    pub head: HeadKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            method: ReplacementMethod::block_aug(4),
            regenerate_augmented_per_epoch: false,
            head: HeadKind::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config("training batch size must be positive");
        }
        self.method.validate()
    }
}

/// One synthesized image per original, labels preserved; ids continue after the originals.
pub fn build_augmented_trainset(
    train: &LabeledDataset,
    method: &ReplacementMethod,
    rng: &mut impl Rng,
) -> Result<LabeledDataset> {
    method.validate()?;
    let offset = train.max_id().map_or(0, |m| m + 1);
    let mut samples = Vec::with_capacity(train.len());
    for (i, s) in train.samples().iter().enumerate() {
        let pixels = if method.is_identity() {
            Arc::clone(&s.pixels)
        } else {
            let (outcome, _) = synthesize_training_image(train, i, method, rng)?;
            Arc::new(outcome.image)
        };
        samples.push(ImageSample {
            id: offset + i as u64,
            pixels,
            label: s.label,
        });
    }
    LabeledDataset::new(Split::Train, samples, train.class_names().clone())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of the very first mini-batch, before any update.
    pub initial_loss: f32,
    /// Size-weighted mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainedBackbone {
    pub model: ModelState,
    pub report: TrainReport,
}

/// Trains `f_θ` (and a throwaway head over all training classes) on the shuffled
/// union of the original and locally replaced training images. The head is dropped.
pub fn train_backbone(
    train: &LabeledDataset,
    backbone: BackboneConfig,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainedBackbone> {
    config.validate()?;
    if train.num_classes() < 2 {
        return self::config("backbone training needs at least two classes");
    }
    let class_index: BTreeMap<usize, usize> =
        train.classes().enumerate().map(|(i, c)| (c, i)).collect();
    let mut net = Backbone::new(backbone, rng)?;
    let mut head = Head::new(config.head, class_index.len(), net.embedding_dim(), rng)?;

    let mut augmented = build_augmented_trainset(train, &config.method, rng)?;
    let n = train.len();
    let mut report = TrainReport::default();
    let mut first = true;

    for epoch in 0..config.epochs {
        if epoch > 0 && config.regenerate_augmented_per_epoch {
            augmented = build_augmented_trainset(train, &config.method, rng)?;
        }
        let mut order: Vec<usize> = (0..2 * n).collect();
        order.shuffle(rng);
        let sample = |i: usize| -> &ImageSample {
            if i < n {
                &train.samples()[i]
            } else {
                &augmented.samples()[i - n]
            }
        };

        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let images = Tensor::stack(chunk.iter().map(|&i| sample(i).pixels.as_ref()))?;
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| class_index[&sample(i).label])
                .collect();
            let (features, caches) = net.embed_cached(&images)?;
            let logits = head.logits(&features)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {loss} at epoch {} batch {b} (lr {}, momentum {})",
                    epoch + 1,
                    config.lr,
                    config.momentum
                )));
            }
            if first {
                report.initial_loss = loss;
                first = false;
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            let dfeatures = head.backward(&features, &dlogits)?;
            net.backward(&caches, dfeatures)?;
            sgd_step(net.params_mut(), config.lr, config.momentum, config.weight_decay);
            sgd_step(head.params_mut(), config.lr, config.momentum, config.weight_decay);
        }
        let mean = (loss_sum / (2 * n) as f64) as f32;
        log::info!("train epoch {}/{}: loss {mean:.4}", epoch + 1, config.epochs);
        report.epoch_losses.push(mean);
    }
    Ok(TrainedBackbone {
        model: ModelState::new(net, None),
        report,
    })
}
