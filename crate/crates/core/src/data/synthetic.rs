//! Procedural texture classes used as a desk-scale benchmark.
//!
//! Each class owns a sinusoidal grating (base frequency, orientation, colour
//! gains, background colour) and a blob colour. Every sample jitters the
//! grating, places the class blob at a random location, and adds Gaussian
//! pixel noise before clamping to [0,1].

use std::collections::BTreeMap;
use std::f32::consts::{PI, TAU};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config, Result};
use crate::numerics::Tensor;

use super::{ImageSample, LabeledDataset, Split};

pub const SYNTHETIC_CHANNELS: usize = 3;
const NOISE_SIGMA: f32 = 0.1;

/// Parameters of a synthetic dataset request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 40,
            per_class: 100,
            side: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
struct ClassStyle {
    freq: f32,
    angle: f32,
    gain: [f32; 3],
    background: [f32; 3],
    blob: [f32; 3],
    blob_radius: f32,
}

impl ClassStyle {
    fn draw(rng: &mut impl Rng, side: usize) -> Self {
        let mut rgb = |lo: f32, hi: f32| -> [f32; 3] {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        };
        let gain = rgb(0.05, 0.3);
        let background = rgb(0.25, 0.75);
        let blob = rgb(0.0, 1.0);
        Self {
            freq: rng.random_range(1.0..5.0),
            angle: rng.random_range(0.0..PI),
            gain,
            background,
            blob,
            blob_radius: side as f32 * rng.random_range(0.1..0.2),
        }
    }
}

/// Builds `classes × per_class` images of `3×side×side`; ids are `class·per_class + i`.
pub fn make_synthetic_dataset(
    classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || per_class < 1 || side < 2 {
        return config(format!(
            "synthetic dataset needs ≥ 2 classes, ≥ 1 image per class and side ≥ 2; got {classes}/{per_class}/{side}"
        ));
    }
    let mut style_rng = ChaCha8Rng::seed_from_u64(seed);
    let styles: Vec<ClassStyle> = (0..classes)
        .map(|_| ClassStyle::draw(&mut style_rng, side))
        .collect();
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");

    let mut samples = Vec::with_capacity(classes * per_class);
    for (c, style) in styles.iter().enumerate() {
        // per-class stream so classes are independent of each other's sample counts
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        for i in 0..per_class {
            let pixels = render(style, side, &mut rng, &noise);
            samples.push(ImageSample {
                id: (c * per_class + i) as u64,
                pixels: Arc::new(pixels),
                label: c,
            });
        }
    }
    let names: BTreeMap<usize, String> = (0..classes).map(|c| (c, format!("class_{c:03}"))).collect();
    LabeledDataset::new(Split::Train, samples, names)
}

fn render(style: &ClassStyle, side: usize, rng: &mut impl Rng, noise: &Normal<f32>) -> Tensor {
    let phase = rng.random_range(0.0..TAU);
    let angle = style.angle + rng.random_range(-0.3..0.3);
    let freq = style.freq * rng.random_range(0.8..1.25);
    let r = style.blob_radius * rng.random_range(0.8..1.2);
    let cy = rng.random_range(0.0..side as f32);
    let cx = rng.random_range(0.0..side as f32);
    let shade = rng.random_range(-0.1..0.1);
    let (sin_a, cos_a) = angle.sin_cos();
    let s = side as f32;

    let mut data = vec![0.0f32; SYNTHETIC_CHANNELS * side * side];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let wave = (TAU * freq * (fx * cos_a + fy * sin_a) / s + phase).sin();
            let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
            let alpha = (-d2 / (2.0 * r * r)).exp();
            for ch in 0..SYNTHETIC_CHANNELS {
                let base = style.background[ch] + shade + style.gain[ch] * wave;
                let v = (1.0 - alpha) * base + alpha * style.blob[ch];
                let n = noise.sample(rng);
                data[(ch * side + y) * side + x] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![SYNTHETIC_CHANNELS, side, side], data).expect("shape matches")
}
