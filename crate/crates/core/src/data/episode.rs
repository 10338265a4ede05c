use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use crate::error::{config, Error, Result};
use crate::numerics::Tensor;

use super::LabeledDataset;

/// n-way k-shot task shape: `t` query and `u` unlabeled images per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n: usize,
    pub k: usize,
    pub t: usize,
    pub u: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n: 5,
            k: 1,
            t: 15,
            u: 15,
        }
    }
}

impl EpisodeSpec {
    pub fn new(n: usize, k: usize, t: usize, u: usize) -> Result<Self> {
        let spec = Self { n, k, t, u };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k < 1 || self.t < 1 {
            return config(format!(
                "episode needs n ≥ 2, k ≥ 1, t ≥ 1; got n={} k={} t={}",
                self.n, self.k, self.t
            ));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.k + self.t + self.u
    }

    /// Total images drawn: `(k + t + u) · n`.
    pub fn total(&self) -> usize {
        self.per_class() * self.n
    }
}

/// A labeled image inside an episode; `label` is the episode-local class index.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSample {
    pub id: u64,
    pub pixels: Arc<Tensor>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledImage {
    pub id: u64,
    pub pixels: Arc<Tensor>,
}

/// Capability required to read the hidden labels of an unlabeled set.
///
/// Only the ground-truth-donor ablation and evaluation diagnostics acquire one;
/// every acquisition is visible at the call site.
#[derive(Debug)]
pub struct OracleAccess(());

impl OracleAccess {
    pub fn acquire() -> Self {
        OracleAccess(())
    }
}

/// Unlabeled images whose true labels are stored but sealed behind [`OracleAccess`].
#[derive(Debug)]
pub struct UnlabeledSet {
    images: Vec<UnlabeledImage>,
    hidden_labels: Vec<usize>,
    oracle_reads: AtomicUsize,
}

impl Clone for UnlabeledSet {
    fn clone(&self) -> Self {
        Self {
            images: self.images.clone(),
            hidden_labels: self.hidden_labels.clone(),
            oracle_reads: AtomicUsize::new(0),
        }
    }
}

impl UnlabeledSet {
    pub fn new(images: Vec<UnlabeledImage>, hidden_labels: Vec<usize>) -> Result<Self> {
        if images.len() != hidden_labels.len() {
            return config("unlabeled set needs one hidden label per image");
        }
        Ok(Self {
            images,
            hidden_labels,
            oracle_reads: AtomicUsize::new(0),
        })
    }

    pub fn empty() -> Self {
        Self {
            images: Vec::new(),
            hidden_labels: Vec::new(),
            oracle_reads: AtomicUsize::new(0),
        }
    }

    pub fn images(&self) -> &[UnlabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Episode-local true labels. Each call is counted.
    pub fn true_labels(&self, _access: &OracleAccess) -> &[usize] {
        self.oracle_reads.fetch_add(1, Ordering::Relaxed);
        &self.hidden_labels
    }

    /// How many times the hidden labels have been read.
    pub fn oracle_reads(&self) -> usize {
        self.oracle_reads.load(Ordering::Relaxed)
    }

    pub fn reset_oracle_reads(&self) {
        self.oracle_reads.store(0, Ordering::Relaxed);
    }
}

/// One few-shot task: support, query, and unlabeled sets over `n` classes.
#[derive(Debug, Clone)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub support: Vec<EpisodeSample>,
    pub query: Vec<EpisodeSample>,
    pub unlabeled: UnlabeledSet,
    /// Episode-local class index → global class id.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }

    pub fn support_images(&self) -> Result<Tensor> {
        Tensor::stack(self.support.iter().map(|s| s.pixels.as_ref()))
    }

    pub fn query_images(&self) -> Result<Tensor> {
        Tensor::stack(self.query.iter().map(|s| s.pixels.as_ref()))
    }

    /// `None` when the unlabeled set is empty.
    pub fn unlabeled_images(&self) -> Result<Option<Tensor>> {
        if self.unlabeled.is_empty() {
            return Ok(None);
        }
        Tensor::stack(self.unlabeled.images().iter().map(|s| s.pixels.as_ref())).map(Some)
    }

    /// Same episode with the unlabeled set dropped.
    pub fn without_unlabeled(&self) -> Episode {
        Episode {
            spec: EpisodeSpec { u: 0, ..self.spec },
            support: self.support.clone(),
            query: self.query.clone(),
            unlabeled: UnlabeledSet::empty(),
            class_map: self.class_map.clone(),
        }
    }
}

/// Draws `n` classes uniformly without replacement, then `k + t + u` images per class
/// uniformly without replacement, split in that order into support / query / unlabeled.
pub fn sample_episode(
    dataset: &LabeledDataset,
    spec: EpisodeSpec,
    rng: &mut impl Rng,
) -> Result<Episode> {
    spec.validate()?;
    let classes: Vec<usize> = dataset.classes().collect();
    if classes.len() < spec.n {
        return Err(Error::Sampling(format!(
            "{}-way episode needs {} classes, the {} split has {}",
            spec.n,
            spec.n,
            dataset.role(),
            classes.len()
        )));
    }
    let need = spec.per_class();
    for &c in &classes {
        let have = dataset.class_members(c).len();
        if have < need {
            return Err(Error::Sampling(format!(
                "class {c} has {have} images, episode needs {need} per class"
            )));
        }
    }

    let chosen = index::sample(rng, classes.len(), spec.n);
    let mut support = Vec::with_capacity(spec.n * spec.k);
    let mut query = Vec::with_capacity(spec.n * spec.t);
    let mut unlabeled = Vec::with_capacity(spec.n * spec.u);
    let mut hidden = Vec::with_capacity(spec.n * spec.u);
    let mut class_map = Vec::with_capacity(spec.n);
    for (local, ci) in chosen.iter().enumerate() {
        let global = classes[ci];
        class_map.push(global);
        let members = dataset.class_members(global);
        let picks = index::sample(rng, members.len(), need);
        for (j, m) in picks.iter().enumerate() {
            let s = &dataset.samples()[members[m]];
            let item = EpisodeSample {
                id: s.id,
                pixels: Arc::clone(&s.pixels),
                label: local,
            };
            if j < spec.k {
                support.push(item);
            } else if j < spec.k + spec.t {
                query.push(item);
            } else {
                unlabeled.push(UnlabeledImage {
                    id: item.id,
                    pixels: item.pixels,
                });
                hidden.push(local);
            }
        }
    }
    Ok(Episode {
        spec,
        support,
        query,
        unlabeled: UnlabeledSet::new(unlabeled, hidden)?,
        class_map,
    })
}
