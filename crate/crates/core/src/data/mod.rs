//! Datasets, class splits, and episodic sampling.

mod episode;
mod load;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{config, Result};
use crate::numerics::Tensor;

pub use episode::{
    sample_episode, Episode, EpisodeSample, EpisodeSpec, OracleAccess, UnlabeledImage,
    UnlabeledSet,
};
pub use load::{export_dataset, load_dataset, parse_split_file, save_png, DatasetSplits};
pub use synthetic::{make_synthetic_dataset, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image with its class label. Pixels are C×H×W in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub pixels: Arc<Tensor>,
    pub label: usize,
}

/// Images of a set of classes playing one role (train / val / test).
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    role: Split,
    samples: Vec<ImageSample>,
    class_names: BTreeMap<usize, String>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl LabeledDataset {
    /// Validates labels against `class_names`, id uniqueness, shapes, and pixel range.
    pub fn new(
        role: Split,
        samples: Vec<ImageSample>,
        class_names: BTreeMap<usize, String>,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut by_class: BTreeMap<usize, Vec<usize>> =
            class_names.keys().map(|&c| (c, Vec::new())).collect();
        let shape = samples.first().map(|s| s.pixels.shape().to_vec());
        for (i, s) in samples.iter().enumerate() {
            let Some(list) = by_class.get_mut(&s.label) else {
                return config(format!(
                    "sample {} has label {} outside the {role} classes",
                    s.id, s.label
                ));
            };
            list.push(i);
            if !ids.insert(s.id) {
                return config(format!("duplicate sample id {}", s.id));
            }
            if Some(s.pixels.shape()) != shape.as_deref() || s.pixels.rank() != 3 {
                return config(format!(
                    "sample {} has shape {:?}, expected C×H×W {:?}",
                    s.id,
                    s.pixels.shape(),
                    shape
                ));
            }
            if s.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return config(format!("sample {} has pixels outside [0,1]", s.id));
            }
        }
        Ok(Self {
            role,
            samples,
            class_names,
            by_class,
        })
    }

    pub fn role(&self) -> Split {
        self.role
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_names.keys().copied()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &BTreeMap<usize, String> {
        &self.class_names
    }

    /// Sample indices of one class, in dataset order.
    pub fn class_members(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map_or(&[], |v| v.as_slice())
    }

    /// C×H×W of every image, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.pixels.shape())
    }

    pub fn max_id(&self) -> Option<u64> {
        self.samples.iter().map(|s| s.id).max()
    }

    /// Histogram of labels.
    pub fn label_counts(&self) -> BTreeMap<usize, usize> {
        self.by_class.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Sub-dataset restricted to `classes`, relabelled to `role`.
    pub fn subset(&self, role: Split, classes: &[usize]) -> Result<Self> {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let mut names = BTreeMap::new();
        for c in &keep {
            let Some(n) = self.class_names.get(c) else {
                return config(format!("class {c} not in dataset"));
            };
            names.insert(*c, n.clone());
        }
        let samples = self
            .samples
            .iter()
            .filter(|s| keep.contains(&s.label))
            .cloned()
            .collect();
        Self::new(role, samples, names)
    }

    /// All images stacked into one B×C×H×W tensor, in the order of `indices`.
    pub fn stack(&self, indices: &[usize]) -> Result<Tensor> {
        Tensor::stack(indices.iter().map(|&i| self.samples[i].pixels.as_ref()))
    }
}

/// Fails if two datasets share a class.
pub fn check_disjoint(a: &LabeledDataset, b: &LabeledDataset) -> Result<()> {
    if let Some(c) = a.classes().find(|c| b.class_names.contains_key(c)) {
        return config(format!(
            "class {c} appears in both the {} and {} splits",
            a.role(),
            b.role()
        ));
    }
    Ok(())
}
