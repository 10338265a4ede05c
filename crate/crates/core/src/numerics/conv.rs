//! 2-D cross-correlation via im2col and a single-threaded SGEMM.

use crate::error::{config, Result};

use super::Tensor;

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return config(format!("conv input must be B×C×H×W, got {input:?}"));
        }
        if weight.len() != 4 {
            return config(format!("conv weight must be C'×C×kh×kw, got {weight:?}"));
        }
        if stride == 0 {
            return config("conv stride must be at least 1");
        }
        let (b, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (co, ci, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if ci != c {
            return config(format!(
                "conv weight expects {ci} input channels, input has {c}"
            ));
        }
        if bias != [co] {
            return config(format!("conv bias must be [{co}], got {bias:?}"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return config(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            batch: b,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: co,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Unfolds one image (C×H×W) into a `patch_len × out_pixels` matrix.
fn im2col(g: &ConvGeometry, image: &[f32], cols: &mut [f32]) {
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto an image gradient.
fn col2im(g: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = beta·c + a (m×k) · b (k×n)`, with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slice lengths cover every index implied by the dimensions and strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass returning the output and the unfolded patches needed by backward.
pub(crate) fn conv2d_forward_cols(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor, ConvGeometry, Vec<f32>)> {
    let g = ConvGeometry::resolve(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let img_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * npix;

    let mut out = vec![0.0f32; g.batch * out_len];
    let mut all_cols = if keep_cols {
        vec![0.0f32; g.batch * plen * npix]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols {
        Vec::new()
    } else {
        vec![0.0f32; plen * npix]
    };

    for b in 0..g.batch {
        let cols = if keep_cols {
            &mut all_cols[b * plen * npix..(b + 1) * plen * npix]
        } else {
            &mut scratch[..]
        };
        im2col(&g, &input.data()[b * img_len..(b + 1) * img_len], cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (co, line) in dst.chunks_exact_mut(npix).enumerate() {
            line.fill(bias.data()[co]);
        }
        gemm(
            g.out_channels,
            plen,
            npix,
            weight.data(),
            (plen as isize, 1),
            cols,
            (npix as isize, 1),
            1.0,
            dst,
        );
    }
    Ok((Tensor::new(g.out_shape().to_vec(), out)?, g, all_cols))
}

/// Cross-correlation of a `B×C×H×W` batch with a `C'×C×kh×kw` kernel bank.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv2d_forward_cols(input, weight, bias, stride, pad, false).map(|(out, _, _)| out)
}

/// Backward pass given the cached patches. Accumulates into `dweight`/`dbias`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    cols: &[f32],
    weight: &Tensor,
    upstream: &Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
    want_input_grad: bool,
) -> Option<Tensor> {
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let img_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * npix;

    let mut dinput = want_input_grad.then(|| vec![0.0f32; g.batch * img_len]);
    let mut dcols = if want_input_grad {
        vec![0.0f32; plen * npix]
    } else {
        Vec::new()
    };

    for b in 0..g.batch {
        let dout = &upstream.data()[b * out_len..(b + 1) * out_len];
        for (co, line) in dout.chunks_exact(npix).enumerate() {
            dbias[co] += line.iter().sum::<f32>();
        }
        let bcols = &cols[b * plen * npix..(b + 1) * plen * npix];
        // dW += dOut · colsᵀ
        gemm(
            g.out_channels,
            npix,
            plen,
            dout,
            (npix as isize, 1),
            bcols,
            (1, npix as isize),
            1.0,
            dweight,
        );
        if let Some(dinput) = dinput.as_mut() {
            // dcols = Wᵀ · dOut
            gemm(
                plen,
                g.out_channels,
                npix,
                weight.data(),
                (1, plen as isize),
                dout,
                (npix as isize, 1),
                0.0,
                &mut dcols,
            );
            col2im(g, &dcols, &mut dinput[b * img_len..(b + 1) * img_len]);
        }
    }
    dinput.map(|d| {
        Tensor::new(vec![g.batch, g.in_channels, g.in_h, g.in_w], d)
            .expect("input gradient matches input shape")
    })
}
