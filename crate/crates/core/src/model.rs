//! Backbone `f_θ`, classifier heads `C_w`, and imprinting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config, usage, Error, Result};
use crate::numerics::{
    gemm, l2_norm, Cache, Layer, ParamId, ParamSet, Sequential, Tensor, L2_EPS,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    /// Follow the block with a 2×2 max-pool.
    pub pool: bool,
}

/// Shape of the convolutional backbone: conv → ReLU → [pool] blocks, then global average pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub side: usize,
    pub blocks: Vec<ConvBlockConfig>,
}

impl BackboneConfig {
    /// Four 3×3 conv blocks of 64 channels, each followed by ReLU and 2×2 max-pool.
    pub fn conv4(in_channels: usize, side: usize) -> Self {
        Self::uniform(in_channels, side, 4, 64)
    }

    pub fn uniform(in_channels: usize, side: usize, depth: usize, channels: usize) -> Self {
        Self {
            in_channels,
            side,
            blocks: vec![
                ConvBlockConfig {
                    out_channels: channels,
                    kernel: 3,
                    pool: true,
                };
                depth
            ],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.side == 0 {
            return config("backbone needs positive input channels and side");
        }
        if self.blocks.is_empty() {
            return config("backbone needs at least one conv block");
        }
        let mut side = self.side;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 {
                return config(format!(
                    "block {i}: channels must be positive and kernel odd, got {} / {}",
                    b.out_channels, b.kernel
                ));
            }
            if b.pool {
                if side < 2 {
                    return config(format!(
                        "pooling plan shrinks a {}px input below 1px at block {i}",
                        self.side
                    ));
                }
                side /= 2;
            }
        }
        Ok(())
    }

    fn blocks_to_string(&self) -> String {
        self.blocks
            .iter()
            .map(|b| {
                format!(
                    "{}:{}:{}",
                    b.out_channels,
                    b.kernel,
                    if b.pool { "pool" } else { "nopool" }
                )
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    fn parse_blocks(s: &str) -> Result<Vec<ConvBlockConfig>> {
        s.split(',')
            .map(|part| {
                let f: Vec<&str> = part.trim().split(':').collect();
                let bad = || Error::Config(format!("bad block spec {part:?}"));
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok(ConvBlockConfig {
                    out_channels: f[0].parse().map_err(|_| bad())?,
                    kernel: f[1].parse().map_err(|_| bad())?,
                    pool: match f[2] {
                        "pool" => true,
                        "nopool" => false,
                        _ => return Err(bad()),
                    },
                })
            })
            .collect()
    }
}

/// Feature extractor `f_θ`.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    net: Sequential,
}

impl Backbone {
    /// He-uniform conv weights, zero biases.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, |fan_in, n| {
            let bound = (6.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        Self::build(config, |_, n| vec![0.0; n])
    }

    fn build(
        config: BackboneConfig,
        mut init: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let mut net = Sequential::new();
        let mut cin = config.in_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel;
            let shape = [b.out_channels, cin, b.kernel, b.kernel];
            let w = Tensor::new(shape.to_vec(), init(fan_in, shape.iter().product()))?;
            net.push_conv(
                &format!("block{i}.conv"),
                w,
                Tensor::zeros(&[b.out_channels]),
                1,
                b.kernel / 2,
            );
            net.push(Layer::Relu);
            if b.pool {
                net.push(Layer::MaxPool2);
            }
            cin = b.out_channels;
        }
        net.push(Layer::GlobalAvgPool);
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    pub fn checksum(&self) -> u64 {
        self.net.params.checksum()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.side || s[3] != c.side {
            return usage(format!(
                "backbone expects B×{}×{}×{} images, got {s:?}",
                c.in_channels, c.side, c.side
            ));
        }
        Ok(())
    }

    /// Forward pass to `B×d` features.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        self.net.forward(images)
    }

    /// Embeds in chunks to bound peak memory.
    pub fn embed_chunked(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_input(images)?;
        let b = images.batch();
        let d = self.embedding_dim();
        let mut out = Vec::with_capacity(b * d);
        let idx: Vec<usize> = (0..b).collect();
        for part in idx.chunks(chunk.max(1)) {
            out.extend(self.net.forward(&images.select_rows(part))?.into_data());
        }
        Tensor::new(vec![b, d], out)
    }

    pub fn embed_cached(&self, images: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        self.check_input(images)?;
        self.net.forward_cached(images)
    }

    /// Accumulates parameter gradients from a feature gradient.
    pub fn backward(&mut self, caches: &[Cache], dfeatures: Tensor) -> Result<()> {
        self.net.backward(caches, dfeatures, false).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    Linear,
    Cosine,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Cosine => "cosine",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "cosine" | "cosine-imprint" => Ok(HeadKind::Cosine),
            other => config(format!("unknown head kind {other:?}")),
        }
    }
}

pub const DEFAULT_COSINE_SCALE: f32 = 10.0;

/// Classifier `C_w` over embedded features.
#[derive(Debug, Clone)]
pub struct Head {
    kind: HeadKind,
    params: ParamSet,
    weight: ParamId,
    bias: Option<ParamId>,
    scale: f32,
}

impl Head {
    /// Weights ~ U(−1/√d, 1/√d); linear bias 0; cosine scale 10.
    pub fn new(kind: HeadKind, classes: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return config("head needs positive class count and feature dimension");
        }
        let bound = 1.0 / (dim as f32).sqrt();
        let w: Vec<f32> = (0..classes * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::from_weights(kind, Tensor::new(vec![classes, dim], w)?, None)
    }

    /// Builds a head from explicit weights (`K×d`) and, for linear heads, an optional bias.
    pub fn from_weights(kind: HeadKind, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return config(format!("head weight must be K×d, got {:?}", weight.shape()));
        }
        let k = weight.shape()[0];
        let mut params = ParamSet::new();
        let weight = params.add("head.weight", weight);
        let bias = match kind {
            HeadKind::Linear => {
                let b = bias.unwrap_or_else(|| Tensor::zeros(&[k]));
                if b.shape() != [k] {
                    return config(format!("head bias must be [{k}], got {:?}", b.shape()));
                }
                Some(params.add("head.bias", b))
            }
            HeadKind::Cosine => None,
        };
        Ok(Self {
            kind,
            params,
            weight,
            bias,
            scale: DEFAULT_COSINE_SCALE,
        })
    }

    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn classes(&self) -> usize {
        self.params.value(self.weight).shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.params.value(self.weight).shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        self.params.value(self.weight)
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.map(|b| self.params.value(b))
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.rank() != 2 || features.shape()[1] != self.dim() {
            return usage(format!(
                "head expects B×{} features, got {:?}",
                self.dim(),
                features.shape()
            ));
        }
        Ok(())
    }

    /// `B×K` logits. Linear: `Wf + b`; cosine: `scale · f̂·Ŵᵀ`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        let (b, d, k) = (features.batch(), self.dim(), self.classes());
        let w = self.weight();
        let mut out = match self.bias() {
            Some(bias) => {
                let mut v = Vec::with_capacity(b * k);
                for _ in 0..b {
                    v.extend_from_slice(bias.data());
                }
                v
            }
            None => vec![0.0; b * k],
        };
        match self.kind {
            HeadKind::Linear => gemm(
                b,
                d,
                k,
                features.data(),
                (d as isize, 1),
                w.data(),
                (1, d as isize),
                1.0,
                &mut out,
            ),
            HeadKind::Cosine => {
                let f = normalized_rows(features);
                let wn = normalized_rows(w);
                for (i, fr) in f.data().chunks_exact(d).enumerate() {
                    for (j, wr) in wn.data().chunks_exact(d).enumerate() {
                        out[i * k + j] = self.scale * dot(fr, wr);
                    }
                }
            }
        }
        Tensor::new(vec![b, k], out)
    }

    /// Accumulates head gradients for `dlogits` and returns the feature gradient.
    pub fn backward(&mut self, features: &Tensor, dlogits: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        let (b, d, k) = (features.batch(), self.dim(), self.classes());
        if dlogits.shape() != [b, k] {
            return usage(format!(
                "dlogits must be {b}×{k}, got {:?}",
                dlogits.shape()
            ));
        }
        let g = dlogits.data();
        match self.kind {
            HeadKind::Linear => {
                if let Some(bias) = self.bias {
                    let db = self.params.grad_mut(bias).data_mut();
                    for row in g.chunks_exact(k) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                gemm(
                    k,
                    b,
                    d,
                    g,
                    (1, k as isize),
                    features.data(),
                    (d as isize, 1),
                    1.0,
                    self.params.grad_mut(self.weight).data_mut(),
                );
                let mut df = vec![0.0; b * d];
                gemm(
                    b,
                    k,
                    d,
                    g,
                    (k as isize, 1),
                    self.weight().data(),
                    (d as isize, 1),
                    0.0,
                    &mut df,
                );
                Tensor::new(vec![b, d], df)
            }
            HeadKind::Cosine => {
                let s = self.scale;
                let w = self.weight().clone();
                let wn = normalized_rows(&w);
                let fnorm = normalized_rows(features);
                // gradient w.r.t. normalized rows, then through the normalization
                let mut dwn = vec![0.0f32; k * d];
                let mut dfn = vec![0.0f32; b * d];
                for i in 0..b {
                    let fr = fnorm.row(i);
                    for j in 0..k {
                        let gij = s * g[i * k + j];
                        let wr = wn.row(j);
                        for t in 0..d {
                            dwn[j * d + t] += gij * fr[t];
                            dfn[i * d + t] += gij * wr[t];
                        }
                    }
                }
                let dw = self.params.grad_mut(self.weight).data_mut();
                for j in 0..k {
                    let back = normalize_backward(w.row(j), wn.row(j), &dwn[j * d..(j + 1) * d]);
                    for (acc, v) in dw[j * d..(j + 1) * d].iter_mut().zip(back) {
                        *acc += v;
                    }
                }
                let mut df = Vec::with_capacity(b * d);
                for i in 0..b {
                    df.extend(normalize_backward(
                        features.row(i),
                        fnorm.row(i),
                        &dfn[i * d..(i + 1) * d],
                    ));
                }
                Tensor::new(vec![b, d], df)
            }
        }
    }

    /// Argmax of logits; ties go to the lowest class index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(argmax_rows(&logits))
    }

    /// Sets row `c` to the normalized mean of the normalized support features of class `c`.
    pub fn imprint(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        if self.kind != HeadKind::Cosine {
            return usage("imprinting requires a cosine head");
        }
        self.check_features(features)?;
        if labels.len() != features.batch() {
            return usage("imprint needs one label per feature row");
        }
        let (k, d) = (self.classes(), self.dim());
        let mut sums = vec![0.0f32; k * d];
        let mut counts = vec![0usize; k];
        let fnorm = normalized_rows(features);
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return usage(format!("support label {y} out of range for {k} classes"));
            }
            counts[y] += 1;
            for (acc, v) in sums[y * d..(y + 1) * d].iter_mut().zip(fnorm.row(i)) {
                *acc += v;
            }
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return usage(format!("class {c} has no support features to imprint"));
        }
        let mut rows = Vec::with_capacity(k * d);
        for c in 0..k {
            let mean: Vec<f32> = sums[c * d..(c + 1) * d]
                .iter()
                .map(|v| v / counts[c] as f32)
                .collect();
            rows.extend(crate::numerics::l2_normalize(&mean));
        }
        *self.params.value_mut(self.weight) = Tensor::new(vec![k, d], rows)?;
        Ok(())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized_rows(t: &Tensor) -> Tensor {
    let d = t.row_len();
    let mut out = Vec::with_capacity(t.len());
    for r in t.data().chunks_exact(d) {
        out.extend(crate::numerics::l2_normalize(r));
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Backward of `x ↦ x/‖x‖` (identity below the norm guard).
fn normalize_backward(x: &[f32], xhat: &[f32], dxhat: &[f32]) -> Vec<f32> {
    let n = l2_norm(x);
    if n <= L2_EPS {
        return dxhat.to_vec();
    }
    let proj = dot(xhat, dxhat);
    dxhat
        .iter()
        .zip(xhat)
        .map(|(g, h)| (g - h * proj) / n)
        .collect()
}

/// Row-wise argmax with lowest-index tie-break.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Backbone plus an optional classifier head.
#[derive(Debug, Clone)]
pub struct ModelState {
    backbone: Backbone,
    head: Option<Head>,
    frozen: bool,
}

impl ModelState {
    pub fn new(backbone: Backbone, head: Option<Head>) -> Self {
        Self {
            backbone,
            head,
            frozen: false,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Mutable backbone access; refused once frozen.
    pub fn backbone_mut(&mut self) -> Result<&mut Backbone> {
        if self.frozen {
            return usage("backbone is frozen");
        }
        Ok(&mut self.backbone)
    }

    pub fn freeze_backbone(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn head(&self) -> Option<&Head> {
        self.head.as_ref()
    }

    pub fn set_head(&mut self, head: Option<Head>) {
        self.head = head;
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.embed(images)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let Some(head) = &self.head else {
            return usage("predict needs a classifier head");
        };
        head.predict(&self.backbone.embed(images)?)
    }

    /// Checksum of θ only.
    pub fn backbone_checksum(&self) -> u64 {
        self.backbone.checksum()
    }

    /// Writes `<stem>.ckpt` (parameters) and `<stem>.meta` (key=value config sidecar).
    pub fn save(&self, stem: &Path, head_kind: HeadKind) -> Result<()> {
        let ckpt = stem.with_extension("ckpt");
        let meta = stem.with_extension("meta");
        let file = std::fs::File::create(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        self.backbone
            .params()
            .write_checkpoint(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(&ckpt, e))?;
        let c = self.backbone.config();
        let text = format!(
            "in_channels={}\nside={}\nblocks={}\nembedding_dim={}\nhead={}\n",
            c.in_channels,
            c.side,
            c.blocks_to_string(),
            c.embedding_dim(),
            head_kind
        );
        std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
    }

    /// Loads a backbone saved with [`ModelState::save`]. The result is frozen and headless.
    pub fn load(stem: &Path) -> Result<(Self, HeadKind)> {
        let ckpt = stem.with_extension("ckpt");
        let meta = stem.with_extension("meta");
        if !ckpt.exists() {
            return usage(format!("missing checkpoint {}", ckpt.display()));
        }
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata {k} is not an integer")))
        };
        let config = BackboneConfig {
            in_channels: parse_usize("in_channels")?,
            side: parse_usize("side")?,
            blocks: BackboneConfig::parse_blocks(get("blocks")?)?,
        };
        let head_kind: HeadKind = get("head")?.parse()?;
        let mut backbone = Backbone::zeros(config)?;
        let file = std::fs::File::open(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let params = ParamSet::read_checkpoint(std::io::BufReader::new(file))?;
        backbone.params_mut().load_values(&params)?;
        let mut model = ModelState::new(backbone, None);
        model.freeze_backbone();
        Ok((model, head_kind))
    }
}
