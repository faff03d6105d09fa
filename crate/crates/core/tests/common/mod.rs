//! Naive reference implementations shared by integration tests.
#![allow(dead_code)]

use kintile_core::{KinKernel, Tensor};

/// Direct 7-loop convolution with zero padding, accumulated in f64.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f32], s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let [b, cin, h, wd] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (wd + 2 * p - kw) / s + 1;
    let mut out = vec![0f64; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co] as f64;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(bi, ci, iy as usize, ix as usize) as f64
                                    * w.at(co, ci, ky, kx) as f64;
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (vec![b, cout, oh, ow], out)
}

/// Scatter form of the transposed convolution, accumulated in f64.
pub fn naive_conv_t(
    x: &Tensor,
    w: &Tensor,
    bias: &[f32],
    s: usize,
    p: usize,
    op: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [b, cin, h, wd] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let oh = (h - 1) * s + kh + op - 2 * p;
    let ow = (wd - 1) * s + kw + op - 2 * p;
    let mut out = vec![0f64; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for v in &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow] {
                *v = bias[co] as f64;
            }
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..wd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * s + ky) as isize - p as isize;
                                let ox = (ix * s + kx) as isize - p as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((bi * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    x.at(bi, ci, iy, ix) as f64 * w.at(co, ci, ky, kx) as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![b, cout, oh, ow], out)
}

/// Reflection index for offsets within one period.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Naive reflection padding.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Tensor {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(x.at(bi, ci, reflect(y as isize - pad as isize, h), reflect(xx as isize - pad as isize, w)));
                }
            }
        }
    }
    Tensor::from_vec([b, c, oh, ow], out).unwrap()
}

/// Deterministic values in `[-1, 1)` so large cases stay cheap to generate.
pub fn lcg(seed: u64, n: usize) -> Vec<f32> {
    let mut s = seed | 1;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

/// Uniform integer in `[lo, hi)` drawn from a running LCG state.
pub fn pick(state: &mut u64, lo: usize, hi: usize) -> usize {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    lo + ((*state >> 33) as usize) % (hi - lo)
}

/// Explicitly padded copy of a `[rows, cols, c]` array, replicating edges.
pub fn pad_edges(t: &[f32], rows: usize, cols: usize, c: usize, q: usize) -> (usize, Vec<f32>) {
    let (pr, pc) = (rows + 2 * q, cols + 2 * q);
    let mut out = vec![0f32; pr * pc * c];
    for r in 0..pr {
        let sr = r.saturating_sub(q).min(rows - 1);
        for col in 0..pc {
            let sc = col.saturating_sub(q).min(cols - 1);
            out[(r * pc + col) * c..(r * pc + col + 1) * c]
                .copy_from_slice(&t[(sr * cols + sc) * c..(sr * cols + sc + 1) * c]);
        }
    }
    (pc, out)
}

pub fn brute_force(
    t: &[f32],
    rows: usize,
    cols: usize,
    c: usize,
    kernel: &KinKernel,
    (i, j): (usize, usize),
) -> Vec<f32> {
    let size = kernel.size();
    let q = size / 2;
    let (pc, padded) = pad_edges(t, rows, cols, c, q);
    let w = kernel.weights();
    (0..c)
        .map(|k| {
            let mut acc = 0f64;
            for u in 0..size {
                for v in 0..size {
                    acc += padded[((i + u) * pc + j + v) * c + k] as f64 * w[u * size + v];
                }
            }
            acc as f32
        })
        .collect()
}

