//! Convolution, padding, activation and statistics primitives.
//!
//! All operations are pure: they borrow their inputs and return freshly
//! allocated tensors. Work inside an operation may be split across output
//! planes, but every plane is accumulated in a fixed order so results do not
//! depend on scheduling.

use rayon::prelude::*;

use crate::error::{KinError, Result};
use crate::tensor::Tensor;

/// Symmetric zero padding applied to height and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PadSpec {
    pub h: usize,
    pub w: usize,
}

impl PadSpec {
    pub const NONE: PadSpec = PadSpec { h: 0, w: 0 };

    pub fn same(p: usize) -> Self {
        PadSpec { h: p, w: p }
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + k - pad` lands in `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// 2-D cross-correlation. `weight` is `[Cout, Cin, kh, kw]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: PadSpec,
) -> Result<Tensor> {
    let [b, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if wcin != cin {
        return Err(KinError::Shape(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if bias.len() != cout {
        return Err(KinError::Shape(format!(
            "conv2d: bias has {} entries for {cout} output channels",
            bias.len()
        )));
    }
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(KinError::InvalidArgument(
            "conv2d: stride and kernel dims must be >= 1".into(),
        ));
    }
    let (ph, pw) = (padding.h, padding.w);
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(KinError::Shape(format!(
            "conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {ph}x{pw}"
        )));
    }
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;

    let wdata = weight.data();
    let mut out = vec![0f32; b * cout * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / cout, idx % cout);
            plane.fill(bias[co]);
            for ci in 0..cin {
                let src = input.plane(bi, ci);
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, ph, stride, h, oh);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx, pw, stride, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wdata[((co * cin + ci) * kh + ky) * kw + kx];
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - ph;
                            let row = &src[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let shift = x0 + kx - pw;
                                let n = x1 - x0;
                                for (o, &i) in orow[x0..x1].iter_mut().zip(&row[shift..shift + n]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += wv * row[ox * stride + kx - pw];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::wrap([b, cout, oh, ow], out))
}

/// Transposed convolution (gradient of [`conv2d`] with respect to its input).
///
/// `weight` is `[Cout, Cin, kh, kw]`. Each input value is stamped into the
/// output at `(iy*stride + ky - pad, ix*stride + kx - pad)`.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: PadSpec,
    output_padding: usize,
) -> Result<Tensor> {
    let [b, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if wcin != cin {
        return Err(KinError::Shape(format!(
            "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if bias.len() != cout {
        return Err(KinError::Shape(format!(
            "conv_transpose2d: bias has {} entries for {cout} output channels",
            bias.len()
        )));
    }
    if stride == 0 || kh == 0 || kw == 0 || h == 0 || w == 0 {
        return Err(KinError::InvalidArgument(
            "conv_transpose2d: stride, kernel and input dims must be >= 1".into(),
        ));
    }
    let (ph, pw) = (padding.h, padding.w);
    let full_h = (h - 1) * stride + kh + output_padding;
    let full_w = (w - 1) * stride + kw + output_padding;
    if full_h <= 2 * ph || full_w <= 2 * pw {
        return Err(KinError::Shape(format!(
            "conv_transpose2d: padding {ph}x{pw} leaves an empty output"
        )));
    }
    let oh = full_h - 2 * ph;
    let ow = full_w - 2 * pw;

    let wdata = weight.data();
    let mut out = vec![0f32; b * cout * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / cout, idx % cout);
            plane.fill(bias[co]);
            for ci in 0..cin {
                let src = input.plane(bi, ci);
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, ph, stride, oh, h);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx, pw, stride, ow, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wdata[((co * cin + ci) * kh + ky) * kw + kx];
                        for iy in y0..y1 {
                            let oy = iy * stride + ky - ph;
                            let row = &src[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ix in x0..x1 {
                                orow[ix * stride + kx - pw] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::wrap([b, cout, oh, ow], out))
}

/// Stride-1 convolution over a reflection-padded input without
/// materializing the padded tensor. Bit-identical to
/// `conv2d(&reflection_pad2d(input, pad)?, weight, bias, 1, PadSpec::NONE)`.
pub fn conv2d_reflect(input: &Tensor, weight: &Tensor, bias: &[f32], pad: usize) -> Result<Tensor> {
    let [b, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if wcin != cin || bias.len() != cout {
        return Err(KinError::Shape(format!(
            "conv2d_reflect: input has {cin} channels and bias {} entries, weight is {:?}",
            bias.len(),
            weight.shape()
        )));
    }
    if pad >= h || pad >= w {
        return Err(KinError::InvalidArgument(format!(
            "reflection pad {pad} must be smaller than both spatial dims of {h}x{w}"
        )));
    }
    if kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(KinError::Shape(format!(
            "conv2d_reflect: {kh}x{kw} kernel does not fit {h}x{w} input with padding {pad}"
        )));
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let src_x: Vec<Vec<usize>> = (0..kw)
        .map(|kx| {
            (0..ow)
                .map(|ox| mirror_index((ox + kx) as isize - pad as isize, w))
                .collect()
        })
        .collect();
    let src_y: Vec<Vec<usize>> = (0..kh)
        .map(|ky| {
            (0..oh)
                .map(|oy| mirror_index((oy + ky) as isize - pad as isize, h))
                .collect()
        })
        .collect();

    let wdata = weight.data();
    let mut out = vec![0f32; b * cout * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / cout, idx % cout);
            plane.fill(bias[co]);
            for ci in 0..cin {
                let src = input.plane(bi, ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdata[((co * cin + ci) * kh + ky) * kw + kx];
                        // columns that need no mirroring
                        let (x0, x1) = valid_range(kx, pad, 1, w, ow);
                        let xs = &src_x[kx];
                        for (oy, &iy) in src_y[ky].iter().enumerate() {
                            let row = &src[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in (0..x0).chain(x1..ow) {
                                orow[ox] += wv * row[xs[ox]];
                            }
                            if x0 < x1 {
                                let shift = x0 + kx - pad;
                                for (o, &i) in orow[x0..x1].iter_mut().zip(&row[shift..shift + x1 - x0]) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::wrap([b, cout, oh, ow], out))
}

/// Mirror index into `[0, n)` excluding the edge sample, repeating the
/// reflection for offsets larger than the axis.
pub(crate) fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflection padding by `pad` on every side, excluding the edge pixel.
pub fn reflection_pad2d(input: &Tensor, pad: usize) -> Result<Tensor> {
    let [b, c, h, w] = input.shape();
    if pad >= h || pad >= w {
        return Err(KinError::InvalidArgument(format!(
            "reflection pad {pad} must be smaller than both spatial dims of {h}x{w}"
        )));
    }
    if pad == 0 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let cols: Vec<usize> = (0..ow)
        .map(|x| mirror_index(x as isize - pad as isize, w))
        .collect();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            let src = input.plane(bi, ci);
            for y in 0..oh {
                let iy = mirror_index(y as isize - pad as isize, h);
                let row = &src[iy * w..(iy + 1) * w];
                out.extend(cols.iter().map(|&x| row[x]));
            }
        }
    }
    Ok(Tensor::wrap([b, c, oh, ow], out))
}

/// Per-(batch, channel) mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub batch: usize,
    pub channels: usize,
    /// Row-major `[batch][channel]`.
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl ChannelStats {
    pub fn mu_of(&self, b: usize) -> &[f32] {
        &self.mu[b * self.channels..(b + 1) * self.channels]
    }

    pub fn sigma_of(&self, b: usize) -> &[f32] {
        &self.sigma[b * self.channels..(b + 1) * self.channels]
    }
}

/// Mean and standard deviation of a slice, two-pass in `f64`.
pub fn mean_std(values: &[f32]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

pub fn channel_stats(input: &Tensor) -> ChannelStats {
    let [b, c, _, _] = input.shape();
    let mut mu = Vec::with_capacity(b * c);
    let mut sigma = Vec::with_capacity(b * c);
    for bi in 0..b {
        for ci in 0..c {
            let (m, s) = mean_std(input.plane(bi, ci));
            mu.push(m as f32);
            sigma.push(s as f32);
        }
    }
    ChannelStats {
        batch: b,
        channels: c,
        mu,
        sigma,
    }
}

/// `gamma * (x - mu) / max(sigma, eps) + beta`, broadcast per channel.
///
/// `mu` and `sigma` are `[B*C]`, `gamma` and `beta` are `[C]`.
pub fn normalize_with_stats(
    input: &Tensor,
    mu: &[f32],
    sigma: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let [b, c, h, w] = input.shape();
    if mu.len() != b * c || sigma.len() != b * c || gamma.len() != c || beta.len() != c {
        return Err(KinError::Shape(format!(
            "normalize: {b}x{c} input with mu {}, sigma {}, gamma {}, beta {}",
            mu.len(),
            sigma.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let hw = h * w;
    let mut out = vec![0f32; input.len()];
    for (idx, (dst, src)) in out
        .chunks_mut(hw.max(1))
        .zip(input.data().chunks(hw.max(1)))
        .enumerate()
    {
        let ci = idx % c;
        let scale = gamma[ci] / sigma[idx].max(eps);
        let (m, shift) = (mu[idx], beta[ci]);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m) * scale + shift;
        }
    }
    Ok(Tensor::wrap([b, c, h, w], out))
}

pub fn relu(input: Tensor) -> Tensor {
    input.map_in_place(|v| v.max(0.0))
}

pub fn tanh(input: Tensor) -> Tensor {
    input.map_in_place(f32::tanh)
}

/// Elementwise `a + b`, consuming `a`.
pub fn add(a: Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(KinError::Shape(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut a = a;
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(a)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [b, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(KinError::InvalidArgument(
            "bilinear_resize: empty input or output".into(),
        ));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for bi in 0..b {
        for ci in 0..c {
            let src = input.plane(bi, ci);
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
    }
    Ok(Tensor::wrap([b, c, out_h, out_w], out))
}
