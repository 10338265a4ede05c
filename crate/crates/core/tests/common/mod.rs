//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use clr_core::numerics::{Layer, ParamSet, Sequential, Tensor};

/// Plain nested-loop cross-correlation in f64. Returns (data, [B, C', H', W']).
pub fn naive_conv(
    input: &[f64],
    in_shape: [usize; 4],
    weight: &[f64],
    w_shape: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, w] = in_shape;
    let [co, ci, kh, kw] = w_shape;
    assert_eq!(c, ci);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = input[((n * c + ch) * h + iy as usize) * w + ix as usize];
                                acc += v * weight[((o * ci + ch) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    (out, [b, co, oh, ow])
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Parameter values of a network as f64 vectors, in id order.
pub fn params_f64(params: &ParamSet) -> Vec<Vec<f64>> {
    params.ids().map(|id| to_f64(params.value(id))).collect()
}

fn index_of(params: &ParamSet, id: clr_core::numerics::ParamId) -> usize {
    params.ids().position(|p| p == id).expect("id belongs to the set")
}

/// Evaluates `net` in f64 with the given parameter values and returns the mean
/// softmax cross-entropy against `labels`.
pub fn shadow_loss(
    net: &Sequential,
    values: &[Vec<f64>],
    input: &Tensor,
    labels: &[usize],
) -> f64 {
    shadow_eval(net, values, input, labels, None).0
}

/// Loss plus the activation pattern: every ReLU on/off flag and every max-pool winner.
/// Two points with equal patterns lie on the same linear piece of the network.
/// With `locked`, ReLUs and pools follow that pattern instead of the current values,
/// which evaluates the smooth function of one fixed piece.
pub fn shadow_eval(
    net: &Sequential,
    values: &[Vec<f64>],
    input: &Tensor,
    labels: &[usize],
    locked: Option<&[u8]>,
) -> (f64, Vec<u8>) {
    let mut pattern = Vec::new();
    let mut decide = |own: u8| -> u8 {
        let d = locked.map_or(own, |l| l[pattern.len()]);
        pattern.push(own);
        d
    };
    let mut x = to_f64(input);
    let mut shape: Vec<usize> = input.shape().to_vec();
    for layer in &net.layers {
        match layer {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                let wt = net.params.value(*weight).shape();
                let (out, s) = naive_conv(
                    &x,
                    [shape[0], shape[1], shape[2], shape[3]],
                    &values[index_of(&net.params, *weight)],
                    [wt[0], wt[1], wt[2], wt[3]],
                    &values[index_of(&net.params, *bias)],
                    *stride,
                    *pad,
                );
                x = out;
                shape = s.to_vec();
            }
            Layer::Relu => x.iter_mut().for_each(|v| {
                if decide((*v > 0.0) as u8) == 0 {
                    *v = 0.0;
                }
            }),
            Layer::MaxPool2 => {
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; b * c * oh * ow];
                for p in 0..b * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let at = |k: u8| x[(p * h + 2 * y + k as usize / 2) * w + 2 * xx + k as usize % 2];
                            let mut win = 0u8;
                            for k in 1..4u8 {
                                if at(k) > at(win) {
                                    win = k;
                                }
                            }
                            out[(p * oh + y) * ow + xx] = at(decide(win));
                        }
                    }
                }
                x = out;
                shape = vec![b, c, oh, ow];
            }
            Layer::GlobalAvgPool => {
                let (b, c) = (shape[0], shape[1]);
                let area: usize = shape[2..].iter().product();
                x = (0..b * c)
                    .map(|p| x[p * area..(p + 1) * area].iter().sum::<f64>() / area as f64)
                    .collect();
                shape = vec![b, c];
            }
            Layer::Linear { weight, bias } => {
                let b = shape[0];
                let d: usize = shape[1..].iter().product();
                let w = &values[index_of(&net.params, *weight)];
                let bb = &values[index_of(&net.params, *bias)];
                let k = bb.len();
                let mut out = vec![0.0; b * k];
                for n in 0..b {
                    for o in 0..k {
                        out[n * k + o] =
                            bb[o] + (0..d).map(|i| w[o * d + i] * x[n * d + i]).sum::<f64>();
                    }
                }
                x = out;
                shape = vec![b, k];
            }
        }
    }
    (cross_entropy(&x, shape[1], labels), pattern)
}

/// Mean of −log softmax(z)[y] over rows, straight from the definition.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let rows = logits.len() / k;
    let mut total = 0.0;
    for r in 0..rows {
        let z = &logits[r * k..(r + 1) * k];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[labels[r]].exp() / denom).ln();
    }
    total / rows as f64
}

pub mod grad {
    use super::*;
    use clr_core::numerics::softmax_cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-3;

    /// 2 conv + pool + linear on 8×8 inputs, batch 4, random widths.
    pub fn tiny_network(seed: u64) -> (Sequential, Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = rng.random_range(1..=3);
        let c1 = rng.random_range(2..=4);
        let c2 = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let mut init = |shape: &[usize], fan_in: usize| {
            let s = (2.0 / fan_in as f32).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-s..s))
        };
        let mut net = Sequential::new();
        let w1 = init(&[c1, cin, 3, 3], cin * 9);
        let b1 = init(&[c1], 10);
        net.push_conv("conv1", w1, b1, 1, 1);
        net.push(Layer::Relu);
        let w2 = init(&[c2, c1, 3, 3], c1 * 9);
        let b2 = init(&[c2], 10);
        net.push_conv("conv2", w2, b2, 1, 1);
        net.push(Layer::Relu);
        net.push(Layer::MaxPool2);
        let wl = init(&[k, c2 * 16], c2 * 16);
        let bl = init(&[k], 10);
        net.push_linear("fc", wl, bl);
        let input = Tensor::from_fn(&[4, cin, 8, 8], |_| rng.random_range(0.0..1.0));
        let labels = (0..4).map(|_| rng.random_range(0..k)).collect();
        (net, input, labels)
    }

    #[derive(Debug, Clone)]
    pub struct GradReport {
        /// Per parameter tensor: ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
        pub errors: Vec<(String, f64)>,
        /// Stencils whose ±step points left the base point's linear piece; these are
        /// evaluated with the base pattern locked.
        pub kink_crossings: usize,
    }

    impl GradReport {
        pub fn max_error(&self) -> f64 {
            self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
        }
    }

    pub fn check(seed: u64) -> GradReport {
        let (mut net, input, labels) = tiny_network(seed);
        let (logits, caches) = net.forward_cached(&input).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
        net.params.zero_grad();
        net.backward(&caches, dlogits, false).unwrap();

        let base = params_f64(&net.params);
        let (_, base_pattern) = shadow_eval(&net, &base, &input, &labels, None);
        let ids: Vec<_> = net.params.ids().collect();
        let mut errors = Vec::new();
        let mut kink_crossings = 0;
        for (p, id) in ids.iter().enumerate() {
            let analytic = to_f64(net.params.grad(*id));
            let mut values = base.clone();
            let mut diff = 0.0;
            let (mut na, mut nn) = (0.0, 0.0);
            for i in 0..values[p].len() {
                let orig = values[p][i];
                values[p][i] = orig + STEP;
                let (up, up_pattern) = shadow_eval(&net, &values, &input, &labels, Some(&base_pattern));
                values[p][i] = orig - STEP;
                let (down, down_pattern) = shadow_eval(&net, &values, &input, &labels, Some(&base_pattern));
                values[p][i] = orig;
                if up_pattern != base_pattern || down_pattern != base_pattern {
                    kink_crossings += 1;
                }
                let numeric = (up - down) / (2.0 * STEP);
                diff += (analytic[i] - numeric).powi(2);
                na += analytic[i].powi(2);
                nn += numeric.powi(2);
            }
            let denom = na.sqrt().max(nn.sqrt()).max(1e-12);
            errors.push((net.params.name(*id).to_string(), diff.sqrt() / denom));
        }
        GradReport {
            errors,
            kink_crossings,
        }
    }
}

pub mod conv {
    use super::*;
    use clr_core::numerics::conv2d_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Max |fast − naive| over one random conv case; also returns the case description.
    pub fn random_case(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(1..=3);
        let c = rng.random_range(1..=4);
        let co = rng.random_range(1..=5);
        let kh = rng.random_range(1..=4);
        let kw = rng.random_range(1..=4);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=2);
        let h = rng.random_range(kh.max(1)..=12);
        let w = rng.random_range(kw.max(1)..=12);
        let input = Tensor::from_fn(&[b, c, h, w], |_| rng.random_range(-1.0..1.0));
        let weight = Tensor::from_fn(&[co, c, kh, kw], |_| rng.random_range(-1.0..1.0));
        let bias = Tensor::from_fn(&[co], |_| rng.random_range(-1.0..1.0));
        let fast = conv2d_forward(&input, &weight, &bias, stride, pad).unwrap();
        let (slow, shape) = naive_conv(
            &to_f64(&input),
            [b, c, h, w],
            &to_f64(&weight),
            [co, c, kh, kw],
            &to_f64(&bias),
            stride,
            pad,
        );
        assert_eq!(fast.shape(), &shape[..]);
        let err = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(&f, &s)| (f as f64 - s).abs())
            .fold(0.0, f64::max);
        let desc = format!("in {b}x{c}x{h}x{w} w {co}x{c}x{kh}x{kw} stride {stride} pad {pad}");
        (err, desc)
    }
}

/// `|observed − p| ≤ 3σ` for a Bernoulli frequency over `trials`.
pub fn within_3_sigma(hits: usize, trials: usize, p: f64) -> Result<(), String> {
    let observed = hits as f64 / trials as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    if (observed - p).abs() <= 3.0 * sigma {
        Ok(())
    } else {
        Err(format!(
            "frequency {observed:.4} vs expected {p:.4} (3σ = {:.4}, {trials} trials)",
            3.0 * sigma
        ))
    }
}

pub mod replace {
    use super::*;
    use clr_core::data::make_synthetic_dataset;
    use clr_core::pipeline::{select_sources, PseudoLabeledPool};
    use clr_core::replacement::{
        apply_replacement, choose_blocks, synthesize_training_image, DonorKind, GridSpec,
        ReplacementMethod,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_method(rng: &mut impl Rng) -> ReplacementMethod {
        match rng.random_range(0..3) {
            0 => ReplacementMethod::block_aug(rng.random_range(0..=6)),
            1 => ReplacementMethod::RandEra {
                area_range: (rng.random_range(0.05..0.2), rng.random_range(0.2..0.5)),
                aspect_range: (rng.random_range(0.3..1.0), rng.random_range(1.0..3.3)),
            },
            _ => ReplacementMethod::BlockDef {
                grid: GridSpec::default(),
                max_blocks: rng.random_range(0..=6),
                mix: rng.random_range(0.05..0.95),
            },
        }
    }

    /// `applications` random operator applications; checks area cap, untouched complement,
    /// replaced-pixel values and zero-cap identity. Returns the number of zero-cap cases.
    pub fn invariants(applications: usize, seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zero_caps = 0;
        for case in 0..applications {
            let method = random_method(&mut rng);
            let c = rng.random_range(1..=3);
            let h = rng.random_range(3..=32);
            let w = rng.random_range(3..=32);
            let target = Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0));
            let source = Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0));
            let out = apply_replacement(&target, &source, 7, &method, &mut rng)
                .map_err(|e| format!("case {case}: {e}"))?;
            let masked = out.replaced_mask.iter().filter(|&&m| m).count();
            if masked > method.max_masked_pixels(h, w) {
                return Err(format!("case {case} {method}: {masked} pixels over the cap on {h}×{w}"));
            }
            if h % 3 == 0 && w % 3 == 0 && out.masked_fraction() > method.area_cap() + 1e-6 {
                return Err(format!("case {case} {method}: fraction {} over cap", out.masked_fraction()));
            }
            if let ReplacementMethod::RandEra { area_range, .. } = method {
                if masked == 0 || masked as f32 > area_range.1 * (h * w) as f32 {
                    return Err(format!("case {case} {method}: erased {masked} pixels"));
                }
            }
            for ch in 0..c {
                for p in 0..h * w {
                    let i = ch * h * w + p;
                    let (t, s, o) = (target.data()[i], source.data()[i], out.image.data()[i]);
                    let expected = if !out.replaced_mask[p] {
                        t
                    } else if let ReplacementMethod::BlockDef { mix, .. } = method {
                        t + mix * (s - t)
                    } else {
                        s
                    };
                    if o.to_bits() != expected.to_bits() {
                        return Err(format!("case {case} {method}: pixel {i} is {o}, expected {expected}"));
                    }
                }
            }
            if method.is_identity() {
                zero_caps += 1;
                if !out.is_unchanged() || out.image != target {
                    return Err(format!("case {case}: zero cap changed the image"));
                }
            }
        }
        Ok(zero_caps)
    }

    /// Block count uniform on 1..=max and each block hit with probability E[count]/9.
    pub fn block_frequencies(draws: usize, max_blocks: usize, seed: u64) -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let method = ReplacementMethod::block_aug(max_blocks);
        let mut per_block = [0usize; 9];
        let mut per_count = vec![0usize; max_blocks + 1];
        for _ in 0..draws {
            let blocks = choose_blocks(&method, &mut rng).map_err(|e| e.to_string())?;
            per_count[blocks.len()] += 1;
            for b in blocks {
                per_block[b] += 1;
            }
        }
        let p_block = (1 + max_blocks) as f64 / 2.0 / 9.0;
        for (b, &hits) in per_block.iter().enumerate() {
            within_3_sigma(hits, draws, p_block).map_err(|e| format!("block {b}: {e}"))?;
        }
        for (count, &hits) in per_count.iter().enumerate().skip(1) {
            within_3_sigma(hits, draws, 1.0 / max_blocks as f64).map_err(|e| format!("count {count}: {e}"))?;
        }
        if per_count[0] != 0 {
            return Err("a positive cap produced an empty block set".into());
        }
        Ok(())
    }

    /// Training donors: same class half of the time (never the image itself), other
    /// classes proportional to their size.
    pub fn training_donors(draws: usize, seed: u64) -> Result<(), String> {
        let ds = make_synthetic_dataset(4, 6, 6, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let method = ReplacementMethod::block_aug(3);
        let mut same = 0;
        let mut other_by_class = [0usize; 4];
        let target = 0;
        for _ in 0..draws {
            let (out, kind) = synthesize_training_image(&ds, target, &method, &mut rng).map_err(|e| e.to_string())?;
            let donor = ds.samples().iter().find(|s| s.id == out.source_id).expect("donor from dataset");
            match kind {
                DonorKind::SameClass => {
                    same += 1;
                    if donor.id == ds.samples()[target].id || donor.label != ds.samples()[target].label {
                        return Err("same-class donor is the target itself or another class".into());
                    }
                }
                DonorKind::OtherClass => {
                    if donor.label == ds.samples()[target].label {
                        return Err("other-class donor shares the target class".into());
                    }
                    other_by_class[donor.label] += 1;
                }
                DonorKind::OtherClassFallback => return Err("unexpected fallback".into()),
            }
        }
        within_3_sigma(same, draws, 0.5).map_err(|e| format!("same-class share: {e}"))?;
        let others = draws - same;
        for c in 1..4 {
            within_3_sigma(other_by_class[c], others, 1.0 / 3.0).map_err(|e| format!("other class {c}: {e}"))?;
        }
        Ok(())
    }

    /// Fine-tune donors: uniform over the unlabeled images carrying the support label.
    pub fn finetune_donors(draws: usize, seed: u64) -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = PseudoLabeledPool::from_labels(vec![1, 0, 1, 2, 1, 0], 3).map_err(|e| e.to_string())?;
        let mut hits = [0usize; 6];
        for _ in 0..draws {
            let donors = select_sources(&[1, 2], &pool, &mut rng);
            hits[donors[0].ok_or("class 1 has donors")?] += 1;
            if donors[1] != Some(3) {
                return Err("singleton class must always give its only donor".into());
            }
        }
        for j in [0, 2, 4] {
            within_3_sigma(hits[j], draws, 1.0 / 3.0).map_err(|e| format!("donor {j}: {e}"))?;
        }
        if hits[1] + hits[3] + hits[5] != 0 {
            return Err("donor drawn outside the matching class".into());
        }
        let empty = PseudoLabeledPool::from_labels(vec![0, 0], 3).map_err(|e| e.to_string())?;
        if select_sources(&[1, 2, 0], &empty, &mut rng)[..2] != [None, None] {
            return Err("classes without pseudo-labeled images must get no donor".into());
        }
        Ok(())
    }
}

pub mod sampler {
    use super::*;
    use clr_core::bench::synthetic_splits;
    use clr_core::data::{sample_episode, EpisodeSpec, OracleAccess, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    pub fn suite(episodes: usize, seed: u64) -> Result<(), String> {
        let splits = synthetic_splits(&SyntheticSpec {
            classes: 40,
            per_class: 35,
            side: 4,
            seed,
        })
        .map_err(|e| e.to_string())?;
        let test = &splits.test;
        let train_ids: BTreeSet<u64> = splits.train.samples().iter().map(|s| s.id).collect();
        let label_of: BTreeMap<u64, usize> = test.samples().iter().map(|s| (s.id, s.label)).collect();
        let spec = EpisodeSpec::default();
        let access = OracleAccess::acquire();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut appearances: BTreeMap<usize, usize> = BTreeMap::new();
        for e in 0..episodes {
            let ep = sample_episode(test, spec, &mut rng).map_err(|err| err.to_string())?;
            let (n, k, t, u) = (spec.n, spec.k, spec.t, spec.u);
            if ep.support.len() != n * k || ep.query.len() != n * t || ep.unlabeled.len() != n * u {
                return Err(format!("episode {e}: wrong set sizes"));
            }
            let ids: Vec<u64> = ep
                .support
                .iter()
                .map(|s| s.id)
                .chain(ep.query.iter().map(|s| s.id))
                .chain(ep.unlabeled.images().iter().map(|s| s.id))
                .collect();
            let unique: BTreeSet<u64> = ids.iter().copied().collect();
            if unique.len() != ids.len() {
                return Err(format!("episode {e}: an image appears twice"));
            }
            if ids.iter().any(|id| train_ids.contains(id) || !label_of.contains_key(id)) {
                return Err(format!("episode {e}: image outside the test split"));
            }
            let classes: BTreeSet<usize> = ep.class_map.iter().copied().collect();
            if classes.len() != n {
                return Err(format!("episode {e}: {} distinct classes", classes.len()));
            }
            let labeled = ep.support.iter().chain(&ep.query);
            for s in labeled {
                if ep.class_map[s.label] != label_of[&s.id] {
                    return Err(format!("episode {e}: local label does not map to the true class"));
                }
            }
            for (img, &local) in ep.unlabeled.images().iter().zip(ep.unlabeled.true_labels(&access)) {
                if ep.class_map[local] != label_of[&img.id] {
                    return Err(format!("episode {e}: hidden label mismatch"));
                }
            }
            for local in 0..n {
                let per = |v: &[usize]| v.iter().filter(|&&l| l == local).count();
                if per(&ep.support_labels()) != k || per(&ep.query_labels()) != t {
                    return Err(format!("episode {e}: class {local} unbalanced"));
                }
            }
            for c in classes {
                *appearances.entry(c).or_default() += 1;
            }
        }
        let p = spec.n as f64 / test.num_classes() as f64;
        for c in test.classes() {
            within_3_sigma(appearances.get(&c).copied().unwrap_or(0), episodes, p)
                .map_err(|err| format!("class {c}: {err}"))?;
        }
        Ok(())
    }
}

pub mod imprint {
    use super::*;
    use clr_core::model::{Head, HeadKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normalize(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= 1e-12 {
            v.to_vec()
        } else {
            v.iter().map(|x| x / n).collect()
        }
    }

    /// Imprints a fresh cosine head and compares each row with an f64 recomputation.
    /// Returns (max abs row error, support self-accuracy, class means pairwise distinct).
    pub fn check(features: &Tensor, labels: &[usize], classes: usize) -> (f64, f64, bool) {
        let d = features.row_len();
        let mut head = Head::new(HeadKind::Cosine, classes, d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        head.imprint(features, labels).unwrap();
        let mut means = vec![vec![0.0f64; d]; classes];
        let mut counts = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate() {
            let f: Vec<f64> = features.row(i).iter().map(|&v| v as f64).collect();
            for (m, v) in means[y].iter_mut().zip(normalize(&f)) {
                *m += v;
            }
            counts[y] += 1;
        }
        let mut max_err = 0.0f64;
        let mut rows = Vec::new();
        for c in 0..classes {
            let mean: Vec<f64> = means[c].iter().map(|v| v / counts[c] as f64).collect();
            let expected = normalize(&mean);
            for (got, want) in head.weight().row(c).iter().zip(&expected) {
                max_err = max_err.max((*got as f64 - want).abs());
            }
            rows.push(expected);
        }
        let distinct = (0..classes).all(|a| {
            (a + 1..classes).all(|b| rows[a].iter().zip(&rows[b]).any(|(x, y)| (x - y).abs() > 1e-6))
        });
        let pred = head.predict(features).unwrap();
        let acc = pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
        (max_err, acc, distinct)
    }
}

pub mod fixtures {
    use clr_core::bench::RunConfig;
    use clr_core::data::{make_synthetic_dataset, EpisodeSpec, LabeledDataset};
    use clr_core::model::{Backbone, BackboneConfig, ModelState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A frozen random two-block backbone on 3×8×8 images.
    pub fn small_model(seed: u64) -> ModelState {
        let bb = Backbone::new(BackboneConfig::uniform(3, 8, 2, 8), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut m = ModelState::new(bb, None);
        m.freeze_backbone();
        m
    }

    /// Ten 3×8×8 classes with `per_class` images each.
    pub fn small_test_set(per_class: usize, seed: u64) -> LabeledDataset {
        make_synthetic_dataset(10, per_class, 8, seed).unwrap()
    }

    /// Quick protocol config: 5-way 1-shot, t=5, u=`u`, 20 fine-tune epochs.
    pub fn quick_config(u: usize, episodes: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.episode = EpisodeSpec { n: 5, k: 1, t: 5, u };
        cfg.finetune.epochs = 20;
        cfg.episodes = episodes;
        cfg.seed = 42;
        cfg
    }
}

pub mod degenerate {
    use clr_core::bench::{ablation_grid, run_protocol, train_for_run, ProtocolOutput, RunConfig};
    use clr_core::data::DatasetSplits;
    use clr_core::model::ModelState;
    use clr_core::pipeline::Variant;

    fn accuracies(out: &ProtocolOutput, v: Variant) -> Vec<u64> {
        out.records_of(v).map(|r| r.accuracy.to_bits()).collect()
    }

    fn same(out: &ProtocolOutput, a: Variant, b: Variant) -> Result<(), String> {
        let (x, y) = (accuracies(out, a), accuracies(out, b));
        if x.is_empty() || x != y {
            return Err(format!("{a} and {b} per-episode accuracies differ"));
        }
        let losses = |v| out.records_of(v).map(|r| r.epoch_losses.clone()).collect::<Vec<_>>();
        if losses(a) != losses(b) {
            return Err(format!("{a} and {b} loss curves differ"));
        }
        Ok(())
    }

    /// u=0 ⇒ every replacement variant ≡ Vanilla; cap 0 ⇒ CLR ≡ Vanilla;
    /// a {0}×{0} ablation grid ≡ a plain Vanilla run. Returns the episodes compared.
    pub fn suite(base: &RunConfig, model: &ModelState, splits: &DatasetSplits) -> Result<usize, String> {
        let err = |e: clr_core::Error| e.to_string();
        let mut cfg = base.clone();
        cfg.episode.u = 0;
        cfg.variants = vec![Variant::Vanilla, Variant::Clr, Variant::Car, Variant::Otlr];
        let out = run_protocol(model, &splits.test, &cfg).map_err(err)?;
        for v in [Variant::Clr, Variant::Car, Variant::Otlr] {
            same(&out, Variant::Vanilla, v).map_err(|e| format!("u=0: {e}"))?;
        }

        let mut cfg = base.clone();
        cfg.finetune_max_blocks = 0;
        cfg.variants = vec![Variant::Vanilla, Variant::Clr];
        let out = run_protocol(model, &splits.test, &cfg).map_err(err)?;
        same(&out, Variant::Vanilla, Variant::Clr).map_err(|e| format!("cap 0: {e}"))?;

        let grid = ablation_grid(&[0], &[0], base, splits).map_err(err)?;
        let mut plain = base.clone();
        plain.train_max_blocks = 0;
        plain.variants = vec![Variant::Vanilla];
        let (plain_model, _) = train_for_run(&plain, &splits.train).map_err(err)?;
        let vanilla = run_protocol(&plain_model, &splits.test, &plain).map_err(err)?;
        let cell: Vec<u64> = grid.cells[0][0].accuracies.iter().map(|a| a.to_bits()).collect();
        if cell != accuracies(&vanilla, Variant::Vanilla) {
            return Err("grid {0}×{0} differs from a plain Vanilla run".into());
        }
        Ok(base.episodes)
    }
}
