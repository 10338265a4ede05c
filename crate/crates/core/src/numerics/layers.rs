//! Sequential layer stack with explicit forward-with-cache / backward pairs.

use crate::error::{config, usage, Result};

use super::conv::{conv2d_backward, conv2d_forward_cols, gemm, ConvGeometry};
use super::{ParamId, ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    },
    Relu,
    /// 2×2 window, stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    /// B×C×H×W → B×C.
    GlobalAvgPool,
    /// Flattens the input to B×d, then `x·Wᵀ + b` with W: K×d.
    Linear { weight: ParamId, bias: ParamId },
}

/// State saved by a forward call for the matching backward call.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv { geom: ConvGeometry, cols: Vec<f32> },
    Relu { positive: Vec<bool> },
    MaxPool { in_shape: Vec<usize>, argmax: Vec<u32> },
    GlobalAvgPool { in_shape: Vec<usize> },
    Linear { input: Tensor, in_shape: Vec<usize> },
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Linear { .. } => "linear",
        }
    }

    pub fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        self.run(params, input, false).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Cache)> {
        self.run(params, input, true)
            .map(|(out, cache)| (out, cache.expect("cache requested")))
    }

    fn run(&self, params: &ParamSet, input: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        match *self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                let (out, geom, cols) = conv2d_forward_cols(
                    input,
                    params.value(weight),
                    params.value(bias),
                    stride,
                    pad,
                    keep,
                )?;
                Ok((out, keep.then_some(Cache::Conv { geom, cols })))
            }
            Layer::Relu => {
                let data: Vec<f32> = input.data().iter().map(|&x| x.max(0.0)).collect();
                let cache = keep.then(|| Cache::Relu {
                    positive: input.data().iter().map(|&x| x > 0.0).collect(),
                });
                Ok((Tensor::new(input.shape().to_vec(), data)?, cache))
            }
            Layer::MaxPool2 => max_pool_forward(input, keep),
            Layer::GlobalAvgPool => {
                let s = input.shape();
                if s.len() != 4 {
                    return config(format!("global average pool expects B×C×H×W, got {s:?}"));
                }
                let (b, c, area) = (s[0], s[1], s[2] * s[3]);
                let data = input
                    .data()
                    .chunks_exact(area)
                    .map(|plane| plane.iter().sum::<f32>() / area as f32)
                    .collect();
                let cache = keep.then(|| Cache::GlobalAvgPool {
                    in_shape: s.to_vec(),
                });
                Ok((Tensor::new(vec![b, c], data)?, cache))
            }
            Layer::Linear { weight, bias } => {
                let w = params.value(weight);
                let bvec = params.value(bias);
                let (batch, d) = (input.batch(), input.row_len());
                if w.rank() != 2 || w.shape()[1] != d {
                    return config(format!(
                        "linear weight {:?} does not accept {d}-dim input",
                        w.shape()
                    ));
                }
                let k = w.shape()[0];
                if bvec.shape() != [k] {
                    return config(format!("linear bias must be [{k}], got {:?}", bvec.shape()));
                }
                let mut out = Vec::with_capacity(batch * k);
                for _ in 0..batch {
                    out.extend_from_slice(bvec.data());
                }
                gemm(batch, d, k, input.data(), (d as isize, 1), w.data(), (1, d as isize), 1.0, &mut out);
                let cache = keep.then(|| Cache::Linear {
                    input: input.clone(),
                    in_shape: input.shape().to_vec(),
                });
                Ok((Tensor::new(vec![batch, k], out)?, cache))
            }
        }
    }

    /// Backward pass. Parameter gradients are accumulated into `params`;
    /// the input gradient is returned when requested.
    pub fn backward(
        &self,
        params: &mut ParamSet,
        cache: &Cache,
        upstream: &Tensor,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        match (self, cache) {
            (
                &Layer::Conv2d { weight, bias, .. },
                Cache::Conv { geom, cols },
            ) => {
                if upstream.shape() != geom.out_shape() {
                    return usage("conv upstream gradient does not match cached forward");
                }
                let w = params.value(weight).clone();
                let mut dw = std::mem::replace(params.grad_mut(weight), Tensor::zeros(&[1]));
                let mut db = std::mem::replace(params.grad_mut(bias), Tensor::zeros(&[1]));
                let dinput = conv2d_backward(
                    geom,
                    cols,
                    &w,
                    upstream,
                    dw.data_mut(),
                    db.data_mut(),
                    want_input_grad,
                );
                *params.grad_mut(weight) = dw;
                *params.grad_mut(bias) = db;
                Ok(dinput)
            }
            (Layer::Relu, Cache::Relu { positive }) => {
                if positive.len() != upstream.len() {
                    return usage("relu upstream gradient does not match cached forward");
                }
                let data = upstream
                    .data()
                    .iter()
                    .zip(positive)
                    .map(|(&g, &p)| if p { g } else { 0.0 })
                    .collect();
                Ok(Some(Tensor::new(upstream.shape().to_vec(), data)?))
            }
            (Layer::MaxPool2, Cache::MaxPool { in_shape, argmax }) => {
                if argmax.len() != upstream.len() {
                    return usage("max-pool upstream gradient does not match cached forward");
                }
                let mut d = Tensor::zeros(in_shape);
                let (area, in_area) = (
                    upstream.shape()[2] * upstream.shape()[3],
                    in_shape[2] * in_shape[3],
                );
                let dd = d.data_mut();
                for (i, (&g, &src)) in upstream.data().iter().zip(argmax).enumerate() {
                    let plane = i / area;
                    dd[plane * in_area + src as usize] += g;
                }
                Ok(Some(d))
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                let area = in_shape[2] * in_shape[3];
                if upstream.len() * area != in_shape.iter().product::<usize>() {
                    return usage("pool upstream gradient does not match cached forward");
                }
                let scale = 1.0 / area as f32;
                let mut d = Vec::with_capacity(upstream.len() * area);
                for &g in upstream.data() {
                    d.extend(std::iter::repeat_n(g * scale, area));
                }
                Ok(Some(Tensor::new(in_shape.clone(), d)?))
            }
            (&Layer::Linear { weight, bias }, Cache::Linear { input, in_shape }) => {
                let (batch, d) = (input.batch(), input.row_len());
                let k = params.value(weight).shape()[0];
                if upstream.shape() != [batch, k] {
                    return usage("linear upstream gradient does not match cached forward");
                }
                {
                    let db = params.grad_mut(bias).data_mut();
                    for row in upstream.data().chunks_exact(k) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                }
                // dW += dyᵀ · x
                gemm(
                    k,
                    batch,
                    d,
                    upstream.data(),
                    (1, k as isize),
                    input.data(),
                    (d as isize, 1),
                    1.0,
                    params.grad_mut(weight).data_mut(),
                );
                if !want_input_grad {
                    return Ok(None);
                }
                let mut dx = vec![0.0f32; batch * d];
                gemm(
                    batch,
                    k,
                    d,
                    upstream.data(),
                    (k as isize, 1),
                    params.value(weight).data(),
                    (d as isize, 1),
                    0.0,
                    &mut dx,
                );
                Ok(Some(Tensor::new(in_shape.clone(), dx)?))
            }
            (layer, _) => usage(format!(
                "{} backward called without its forward cache",
                layer.kind()
            )),
        }
    }
}

fn max_pool_forward(input: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
    let s = input.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return config(format!("2×2 max-pool needs B×C×H×W with H,W ≥ 2, got {s:?}"));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(if keep { planes * oh * ow } else { 0 });
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = plane[best_idx];
                // row-major scan; strict comparison keeps the first maximum
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                if keep {
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    let cache = keep.then(|| Cache::MaxPool {
        in_shape: s.to_vec(),
        argmax,
    });
    Ok((Tensor::new(vec![s[0], s[1], oh, ow], out)?, cache))
}

/// Fixed sequential stack owning its parameters.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    pub params: ParamSet,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_conv(&mut self, name: &str, weight: Tensor, bias: Tensor, stride: usize, pad: usize) {
        let weight = self.params.add(format!("{name}.weight"), weight);
        let bias = self.params.add(format!("{name}.bias"), bias);
        self.layers.push(Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        });
    }

    pub fn push_linear(&mut self, name: &str, weight: Tensor, bias: Tensor) {
        let weight = self.params.add(format!("{name}.weight"), weight);
        let bias = self.params.add(format!("{name}.bias"), bias);
        self.layers.push(Layer::Linear { weight, bias });
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    /// Inference pass; keeps no caches.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&self.params, &x)?;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&self.params, &x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagates through every layer, accumulating parameter gradients.
    pub fn backward(
        &mut self,
        caches: &[Cache],
        upstream: Tensor,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if caches.len() != self.layers.len() {
            return usage(format!(
                "backward needs {} caches, got {}",
                self.layers.len(),
                caches.len()
            ));
        }
        let mut grad = upstream;
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let want = i > 0 || want_input_grad;
            match layer.backward(&mut self.params, cache, &grad, want)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }
}
