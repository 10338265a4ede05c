//! Local replacement operators and the training-time image synthesis.
//!
//! Three operators overwrite or mix sub-regions of a target image with the
//! same-position region of a donor:
//!
//! * [`ReplacementMethod::BlockAug`]: grid blocks copied from the donor.
//! * [`ReplacementMethod::RandEra`]: one random rectangle copied from the donor.
//! * [`ReplacementMethod::BlockDef`]: grid blocks linearly mixed with the donor.

use std::fmt;

use rand::seq::index;
use rand::Rng;

use crate::data::{ImageSample, LabeledDataset};
use crate::error::{config, usage, Result};
use crate::numerics::Tensor;

/// Even `rows × cols` partition of an image; remainder pixels go to the last row / column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { rows: 3, cols: 3 }
    }
}

impl GridSpec {
    pub fn blocks(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixel rectangle `(y0, y1, x0, x1)` (half-open) of block `idx` in an `h×w` image.
    pub fn block_rect(&self, idx: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (idx / self.cols, idx % self.cols);
        let (y0, y1) = span(r, self.rows, h);
        let (x0, x1) = span(c, self.cols, w);
        (y0, y1, x0, x1)
    }
}

fn span(i: usize, parts: usize, len: usize) -> (usize, usize) {
    let base = len / parts;
    let start = i * base;
    let end = if i + 1 == parts { len } else { start + base };
    (start, end)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplacementMethod {
    BlockAug {
        grid: GridSpec,
        max_blocks: usize,
    },
    RandEra {
        area_range: (f32, f32),
        aspect_range: (f32, f32),
    },
    BlockDef {
        grid: GridSpec,
        max_blocks: usize,
        mix: f32,
    },
}

pub const DEFAULT_RANDERA_AREA: (f32, f32) = (0.1, 0.3);
pub const DEFAULT_RANDERA_ASPECT: (f32, f32) = (0.3, 3.3);
pub const DEFAULT_BLOCKDEF_MIX: f32 = 0.5;

impl ReplacementMethod {
    pub fn block_aug(max_blocks: usize) -> Self {
        ReplacementMethod::BlockAug {
            grid: GridSpec::default(),
            max_blocks,
        }
    }

    pub fn rand_era() -> Self {
        ReplacementMethod::RandEra {
            area_range: DEFAULT_RANDERA_AREA,
            aspect_range: DEFAULT_RANDERA_ASPECT,
        }
    }

    pub fn block_def(max_blocks: usize) -> Self {
        ReplacementMethod::BlockDef {
            grid: GridSpec::default(),
            max_blocks,
            mix: DEFAULT_BLOCKDEF_MIX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ReplacementMethod::BlockAug { grid, max_blocks }
            | ReplacementMethod::BlockDef {
                grid, max_blocks, ..
            } => {
                if grid.rows == 0 || grid.cols == 0 {
                    return config("replacement grid needs positive rows and cols");
                }
                if max_blocks > grid.blocks() {
                    return config(format!(
                        "max_blocks {max_blocks} exceeds the {}×{} grid",
                        grid.rows, grid.cols
                    ));
                }
                if let ReplacementMethod::BlockDef { mix, .. } = *self {
                    if !(mix > 0.0 && mix < 1.0) {
                        return config(format!("BlockDef mix must lie in (0,1), got {mix}"));
                    }
                }
                Ok(())
            }
            ReplacementMethod::RandEra {
                area_range: (lo, hi),
                aspect_range: (alo, ahi),
            } => {
                if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                    return config(format!("RandEra area range needs 0 < lo ≤ hi < 1, got [{lo}, {hi}]"));
                }
                if !(alo > 0.0 && alo <= ahi) {
                    return config(format!("RandEra aspect range needs 0 < lo ≤ hi, got [{alo}, {ahi}]"));
                }
                Ok(())
            }
        }
    }

    /// Largest fraction of the image area one application may touch.
    pub fn area_cap(&self) -> f32 {
        match *self {
            ReplacementMethod::BlockAug { grid, max_blocks }
            | ReplacementMethod::BlockDef {
                grid, max_blocks, ..
            } => max_blocks as f32 / grid.blocks() as f32,
            ReplacementMethod::RandEra { area_range, .. } => area_range.1,
        }
    }

    /// Upper bound on the replaced pixel count in an `h×w` image.
    pub fn max_masked_pixels(&self, h: usize, w: usize) -> usize {
        match *self {
            ReplacementMethod::BlockAug { grid, max_blocks }
            | ReplacementMethod::BlockDef {
                grid, max_blocks, ..
            } => {
                let mut areas: Vec<usize> = (0..grid.blocks())
                    .map(|i| {
                        let (y0, y1, x0, x1) = grid.block_rect(i, h, w);
                        (y1 - y0) * (x1 - x0)
                    })
                    .collect();
                areas.sort_unstable_by(|a, b| b.cmp(a));
                areas.iter().take(max_blocks).sum()
            }
            ReplacementMethod::RandEra { area_range, .. } => {
                (area_range.1 * (h * w) as f32).floor() as usize
            }
        }
    }

    /// True when the method can never change an image.
    pub fn is_identity(&self) -> bool {
        match *self {
            ReplacementMethod::BlockAug { max_blocks, .. }
            | ReplacementMethod::BlockDef { max_blocks, .. } => max_blocks == 0,
            ReplacementMethod::RandEra { .. } => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReplacementMethod::BlockAug { .. } => "blockaug",
            ReplacementMethod::RandEra { .. } => "randera",
            ReplacementMethod::BlockDef { .. } => "blockdef",
        }
    }

    /// Same operator with a different block cap (ignored by RandEra).
    pub fn with_max_blocks(self, max: usize) -> Self {
        match self {
            ReplacementMethod::BlockAug { grid, .. } => ReplacementMethod::BlockAug {
                grid,
                max_blocks: max,
            },
            ReplacementMethod::BlockDef { grid, mix, .. } => ReplacementMethod::BlockDef {
                grid,
                max_blocks: max,
                mix,
            },
            other => other,
        }
    }
}

impl fmt::Display for ReplacementMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplacementMethod::BlockAug { grid, max_blocks } => {
                write!(f, "blockaug({}x{}, max {max_blocks})", grid.rows, grid.cols)
            }
            ReplacementMethod::RandEra {
                area_range,
                aspect_range,
            } => write!(
                f,
                "randera(area {}-{}, aspect {}-{})",
                area_range.0, area_range.1, aspect_range.0, aspect_range.1
            ),
            ReplacementMethod::BlockDef {
                grid,
                max_blocks,
                mix,
            } => write!(
                f,
                "blockdef({}x{}, max {max_blocks}, mix {mix})",
                grid.rows, grid.cols
            ),
        }
    }
}

/// Draws the blocks to replace: count uniform on `1..=max_blocks` (none when the cap is 0),
/// positions uniform without replacement. Returned sorted.
pub fn choose_blocks(method: &ReplacementMethod, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let (grid, max_blocks) = match *method {
        ReplacementMethod::BlockAug { grid, max_blocks }
        | ReplacementMethod::BlockDef {
            grid, max_blocks, ..
        } => (grid, max_blocks),
        ReplacementMethod::RandEra { .. } => return usage("choose_blocks needs a block method"),
    };
    if max_blocks == 0 {
        return Ok(Vec::new());
    }
    let count = rng.random_range(1..=max_blocks);
    let mut picks = index::sample(rng, grid.blocks(), count).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

/// A locally replaced image with its H×W mask of touched pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementOutcome {
    pub image: Tensor,
    pub replaced_mask: Vec<bool>,
    pub source_id: u64,
}

impl ReplacementOutcome {
    pub fn masked_fraction(&self) -> f32 {
        let n = self.replaced_mask.iter().filter(|&&m| m).count();
        n as f32 / self.replaced_mask.len() as f32
    }

    pub fn is_unchanged(&self) -> bool {
        self.replaced_mask.iter().all(|&m| !m)
    }
}

/// Applies `method` to `target` using the same-position region of `source`.
pub fn apply_replacement(
    target: &Tensor,
    source: &Tensor,
    source_id: u64,
    method: &ReplacementMethod,
    rng: &mut impl Rng,
) -> Result<ReplacementOutcome> {
    if target.shape() != source.shape() || target.rank() != 3 {
        return usage(format!(
            "replacement needs equal C×H×W images, got {:?} and {:?}",
            target.shape(),
            source.shape()
        ));
    }
    let blocks = match method {
        ReplacementMethod::RandEra { .. } => Vec::new(),
        _ => choose_blocks(method, rng)?,
    };
    apply_with_blocks(target, source, source_id, method, &blocks, rng)
}

/// Like [`apply_replacement`] but with the block set fixed by the caller (block methods).
pub fn apply_with_blocks(
    target: &Tensor,
    source: &Tensor,
    source_id: u64,
    method: &ReplacementMethod,
    blocks: &[usize],
    rng: &mut impl Rng,
) -> Result<ReplacementOutcome> {
    if target.shape() != source.shape() || target.rank() != 3 {
        return usage("replacement needs equal C×H×W images");
    }
    let (c, h, w) = (target.shape()[0], target.shape()[1], target.shape()[2]);
    let mut mask = vec![false; h * w];
    let mut image = target.clone();
    let mut mark = |y0: usize, y1: usize, x0: usize, x1: usize| {
        for y in y0..y1 {
            mask[y * w + x0..y * w + x1].fill(true);
        }
    };
    match *method {
        ReplacementMethod::BlockAug { grid, .. } | ReplacementMethod::BlockDef { grid, .. } => {
            for &b in blocks {
                if b >= grid.blocks() {
                    return usage(format!("block {b} outside the {}×{} grid", grid.rows, grid.cols));
                }
                let (y0, y1, x0, x1) = grid.block_rect(b, h, w);
                mark(y0, y1, x0, x1);
            }
        }
        ReplacementMethod::RandEra {
            area_range,
            aspect_range,
        } => {
            let area = rng.random_range(area_range.0..=area_range.1) * (h * w) as f32;
            let aspect = rng.random_range(aspect_range.0..=aspect_range.1);
            // floor keeps the rectangle within the drawn area
            let eh = ((area * aspect).sqrt().floor() as usize).clamp(1, h);
            let ew = ((area / aspect).sqrt().floor() as usize).clamp(1, w);
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            mark(y0, y0 + eh, x0, x0 + ew);
        }
    }
    let mix = match *method {
        ReplacementMethod::BlockDef { mix, .. } => Some(mix),
        _ => None,
    };
    let src = source.data();
    let dst = image.data_mut();
    for ch in 0..c {
        let off = ch * h * w;
        for (p, &m) in mask.iter().enumerate() {
            if m {
                let t = dst[off + p];
                dst[off + p] = match mix {
                    Some(a) => t + a * (src[off + p] - t),
                    None => src[off + p],
                };
            }
        }
    }
    Ok(ReplacementOutcome {
        image,
        replaced_mask: mask,
        source_id,
    })
}

/// Which pool the training donor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DonorKind {
    SameClass,
    OtherClass,
    /// The target's class has no other image; an other-class donor was used instead.
    OtherClassFallback,
}

/// Synthesizes `x_i^s` for a training image `x_i` (at `index` in `dataset`).
///
/// With probability 0.5 the donor is another image of the same class, otherwise
/// an image of any other class, each uniformly. The label stays `y_i`.
pub fn synthesize_training_image(
    dataset: &LabeledDataset,
    index: usize,
    method: &ReplacementMethod,
    rng: &mut impl Rng,
) -> Result<(ReplacementOutcome, DonorKind)> {
    let target = &dataset.samples()[index];
    let same = dataset.class_members(target.label);
    let others = dataset.len() - same.len();
    if others == 0 {
        return usage("training synthesis needs at least one image outside the target class");
    }
    let want_same = rng.random_bool(0.5);
    let (donor, kind) = if want_same && same.len() >= 2 {
        let pos = same
            .iter()
            .position(|&i| i == index)
            .expect("target is a member of its class");
        let mut r = rng.random_range(0..same.len() - 1);
        if r >= pos {
            r += 1;
        }
        (same[r], DonorKind::SameClass)
    } else {
        let kind = if want_same {
            log::warn!(
                "class {} has a single image; sample {} takes an other-class donor",
                target.label,
                target.id
            );
            DonorKind::OtherClassFallback
        } else {
            DonorKind::OtherClass
        };
        (draw_other_class(dataset, target, rng), kind)
    };
    let src: &ImageSample = &dataset.samples()[donor];
    let outcome = apply_replacement(&target.pixels, &src.pixels, src.id, method, rng)?;
    Ok((outcome, kind))
}

fn draw_other_class(dataset: &LabeledDataset, target: &ImageSample, rng: &mut impl Rng) -> usize {
    loop {
        let j = rng.random_range(0..dataset.len());
        if dataset.samples()[j].label != target.label {
            return j;
        }
    }
}
