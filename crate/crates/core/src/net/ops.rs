//! Convolution primitives and inference-mode batch normalization.
//!
//! Every output element is accumulated in a fixed order (input channel,
//! kernel row, kernel column), so results are bit-identical from run to run.

use crate::container::NdTensor;
use crate::error::{Error, Result};
use crate::types::Tensor3;

/// Output channels computed together; keeps the accumulator rows in L1.
const CHANNEL_BLOCK: usize = 8;

pub const BN_EPS: f64 = 1e-5;

fn kernel_dims(name: &str, weight: &NdTensor) -> Result<(usize, usize, usize)> {
    match weight.shape.as_slice() {
        &[a, b, k0, k1] if k0 == k1 && k0 > 0 => Ok((a, b, k0)),
        other => Err(Error::Shape {
            name: name.into(),
            expected: vec![0, 0, 0, 0],
            found: other.to_vec(),
        }),
    }
}

/// Output length of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

/// 2D cross-correlation without bias.
///
/// `weight` has shape `(F_out, C_in, k, k)`. Positions outside the input read
/// as zero. With `padding = k / 2` the output is `ceil(H / stride)` by
/// `ceil(W / stride)`.
pub fn conv2d(input: &Tensor3, weight: &NdTensor, stride: usize, padding: usize) -> Result<Tensor3> {
    let (f_out, c_in, k) = kernel_dims("conv2d weight", weight)?;
    if c_in != input.channels {
        return Err(Error::Shape {
            name: "conv2d weight".into(),
            expected: vec![f_out, input.channels, k, k],
            found: weight.shape.clone(),
        });
    }
    if stride == 0 || input.height + 2 * padding < k || input.width + 2 * padding < k {
        return Err(Error::Config(format!(
            "conv2d: kernel {k} stride {stride} padding {padding} does not fit {}x{}",
            input.height, input.width
        )));
    }
    let (h, w) = (input.height, input.width);
    let ho = conv_out_len(h, k, stride, padding);
    let wo = conv_out_len(w, k, stride, padding);
    let mut out = Tensor3::zeros(f_out, ho, wo);
    if ho == 0 || wo == 0 || f_out == 0 {
        return Ok(out);
    }

    // valid output column range for each kernel column
    let col_ranges: Vec<(usize, usize)> = (0..k)
        .map(|v| {
            let lo = padding.saturating_sub(v).div_ceil(stride);
            let hi = if w + padding > v {
                ((w - 1 + padding - v) / stride + 1).min(wo)
            } else {
                0
            };
            (lo, hi.max(lo))
        })
        .collect();

    let plane = ho * wo;
    for (bi, block) in out.data.chunks_mut(CHANNEL_BLOCK * plane).enumerate() {
        let f0 = bi * CHANNEL_BLOCK;
        let nb = block.len() / plane;
        // weights regrouped as [c][u][v][fb]
        let mut wblk = vec![0.0f32; c_in * k * k * nb];
        for fb in 0..nb {
            for c in 0..c_in {
                for uv in 0..k * k {
                    wblk[(c * k * k + uv) * nb + fb] = weight.data[((f0 + fb) * c_in + c) * k * k + uv];
                }
            }
        }
        let mut acc = vec![0.0f32; nb * wo];
        for i in 0..ho {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for c in 0..c_in {
                for u in 0..k {
                    let r = (i * stride + u) as isize - padding as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    let row_start = (c * h + r as usize) * w;
                    let in_row = &input.data[row_start..row_start + w];
                    for v in 0..k {
                        let (lo, hi) = col_ranges[v];
                        if lo >= hi {
                            continue;
                        }
                        let wrow = &wblk[(c * k * k + u * k + v) * nb..][..nb];
                        for (fb, &wv) in wrow.iter().enumerate() {
                            let dst = &mut acc[fb * wo + lo..fb * wo + hi];
                            if stride == 1 {
                                let start = lo + v - padding;
                                let src = &in_row[start..start + (hi - lo)];
                                for (a, x) in dst.iter_mut().zip(src) {
                                    *a += wv * x;
                                }
                            } else {
                                for (t, a) in dst.iter_mut().enumerate() {
                                    *a += wv * in_row[(lo + t) * stride + v - padding];
                                }
                            }
                        }
                    }
                }
            }
            for fb in 0..nb {
                block[fb * plane + i * wo..fb * plane + (i + 1) * wo]
                    .copy_from_slice(&acc[fb * wo..(fb + 1) * wo]);
            }
        }
    }
    Ok(out)
}

/// Transposed convolution upsampling by an integer `factor`.
///
/// `weight` has shape `(C_in, F_out, factor, factor)`; each input pixel
/// spreads onto a disjoint `factor x factor` output patch, so the output is
/// exactly `(F_out, H * factor, W * factor)`. This is the adjoint of
/// [`conv2d`] with the same weight, stride `factor` and no padding.
pub fn tconv2d(input: &Tensor3, weight: &NdTensor, factor: usize) -> Result<Tensor3> {
    let (c_in, f_out, k) = kernel_dims("tconv2d weight", weight)?;
    if factor == 0 || k != factor {
        return Err(Error::Config(format!(
            "tconv2d: kernel size {k} must equal the upsampling factor {factor}"
        )));
    }
    if c_in != input.channels {
        return Err(Error::Shape {
            name: "tconv2d weight".into(),
            expected: vec![input.channels, f_out, k, k],
            found: weight.shape.clone(),
        });
    }
    let (h, w) = (input.height, input.width);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor3::zeros(f_out, ho, wo);
    if f_out == 0 || h == 0 || w == 0 {
        return Ok(out);
    }
    let in_plane = h * w;
    let plane = ho * wo;
    for (bi, block) in out.data.chunks_mut(CHANNEL_BLOCK * plane).enumerate() {
        let o0 = bi * CHANNEL_BLOCK;
        let nb = block.len() / plane;
        let mut acc = vec![0.0f32; nb * w];
        for i in 0..h {
            for u in 0..k {
                for v in 0..k {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for c in 0..c_in {
                        let src = &input.data[c * in_plane + i * w..c * in_plane + (i + 1) * w];
                        for fb in 0..nb {
                            let wv = weight.data[((c * f_out + o0 + fb) * k + u) * k + v];
                            for (a, x) in acc[fb * w..(fb + 1) * w].iter_mut().zip(src) {
                                *a += wv * x;
                            }
                        }
                    }
                    let row = i * factor + u;
                    for fb in 0..nb {
                        let dst = &mut block[fb * plane + row * wo..fb * plane + (row + 1) * wo];
                        for (j, &a) in acc[fb * w..(fb + 1) * w].iter().enumerate() {
                            dst[j * factor + v] = a;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adds a per-channel bias in place.
pub fn add_bias(x: &mut Tensor3, bias: &[f32]) {
    let plane = x.height * x.width;
    for (c, &b) in bias.iter().enumerate() {
        x.data[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v += b);
    }
}

/// Inference batch normalization folded into `y = scale * x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl BatchNorm {
    pub fn from_stats(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> Self {
        let mut scale = Vec::with_capacity(gamma.len());
        let mut shift = Vec::with_capacity(gamma.len());
        for c in 0..gamma.len() {
            let a = gamma[c] as f64 / (var[c] as f64 + BN_EPS).sqrt();
            scale.push(a as f32);
            shift.push((beta[c] as f64 - a * mean[c] as f64) as f32);
        }
        Self { scale, shift }
    }

    #[inline]
    pub fn apply(&self, c: usize, x: f32) -> f32 {
        self.scale[c] * x + self.shift[c]
    }

    /// Normalizes every channel of `x`, optionally followed by ReLU.
    pub fn apply_map(&self, x: &mut Tensor3, relu: bool) {
        let plane = x.height * x.width;
        for c in 0..x.channels {
            let (a, b) = (self.scale[c], self.shift[c]);
            for v in &mut x.data[c * plane..(c + 1) * plane] {
                let y = a * *v + b;
                *v = if relu { y.max(0.0) } else { y };
            }
        }
    }
}
