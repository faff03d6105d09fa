//! Image quality and seam metrics, plus the per-layer statistics similarity
//! analysis used to study how normalization statistics drift across an image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::generator::{Generator, ProbeRecord};
use crate::io::Rgb8Image;
use crate::normstrat::Coord;
use crate::pipeline::{extract_patch, TileGrid};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 256;
pub const SSIM_WINDOW: usize = 8;
/// `(0.01 * 255)^2`
pub const SSIM_C1: f64 = 6.5025;
/// `(0.03 * 255)^2`
pub const SSIM_C2: f64 = 58.5225;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub parameters: BTreeMap<String, f64>,
    pub images: Vec<String>,
}

/// Pearson correlation of two histograms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramCorrelation {
    pub value: f64,
    /// One of the histograms had zero variance; `value` is then 0.
    pub degenerate: bool,
}

/// 256-bin per-channel histograms normalized by pixel count and
/// concatenated R, G, B.
pub fn rgb_histogram(img: &Rgb8Image) -> Vec<f64> {
    let mut h = vec![0f64; 3 * HISTOGRAM_BINS];
    for px in img.as_bytes().chunks_exact(3) {
        for c in 0..3 {
            h[c * HISTOGRAM_BINS + px[c] as usize] += 1.0;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

pub fn histogram_correlation(a: &Rgb8Image, b: &Rgb8Image) -> HistogramCorrelation {
    match pearson(&rgb_histogram(a), &rgb_histogram(b)) {
        Some(value) => HistogramCorrelation {
            value,
            degenerate: false,
        },
        None => {
            log::warn!("histogram correlation undefined for a zero-variance histogram");
            HistogramCorrelation {
                value: 0.0,
                degenerate: true,
            }
        }
    }
}

/// Full-range BT.601 YCbCr planes.
pub fn to_ycbcr(img: &Rgb8Image) -> [Vec<f64>; 3] {
    let n = img.width() * img.height();
    let (mut y, mut cb, mut cr) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for px in img.as_bytes().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        y.push(0.299 * r + 0.587 * g + 0.114 * b);
        cb.push(128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b);
        cr.push(128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b);
    }
    [y, cb, cr]
}

/// Mean Sobel magnitude over the interior `(H-2) x (W-2)` pixels of one plane.
pub fn sobel_mean(plane: &[f64], width: usize, height: usize) -> f64 {
    if width < 3 || height < 3 {
        return 0.0;
    }
    let at = |x: usize, y: usize| plane[y * width + x];
    let mut total = 0.0;
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / ((width - 2) * (height - 2)) as f64
}

/// Mean Sobel gradient magnitude of the Y, Cb and Cr planes, averaged over
/// the three planes.
pub fn sobel_gradient_ycbcr(img: &Rgb8Image) -> f64 {
    let planes = to_ycbcr(img);
    planes
        .iter()
        .map(|p| sobel_mean(p, img.width(), img.height()))
        .sum::<f64>()
        / 3.0
}

/// Summed-area table with a zero row and column prepended.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: impl Iterator<Item = f64>, width: usize, height: usize) -> Self {
        let w = width + 1;
        let mut sums = vec![0f64; w * (height + 1)];
        let mut it = values;
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += it.next().expect("enough values");
                sums[(y + 1) * w + x + 1] = sums[y * w + x + 1] + row;
            }
        }
        Integral { w, sums }
    }

    fn window(&self, x: usize, y: usize, size: usize) -> f64 {
        let s = &self.sums;
        let w = self.w;
        s[(y + size) * w + x + size] - s[y * w + x + size] - s[(y + size) * w + x] + s[y * w + x]
    }
}

fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize, window: usize) -> f64 {
    let ia = Integral::new(a.iter().copied(), width, height);
    let ib = Integral::new(b.iter().copied(), width, height);
    let iaa = Integral::new(a.iter().map(|v| v * v), width, height);
    let ibb = Integral::new(b.iter().map(|v| v * v), width, height);
    let iab = Integral::new(a.iter().zip(b).map(|(x, y)| x * y), width, height);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=height - window {
        for x in 0..=width - window {
            let ma = ia.window(x, y, window) / n;
            let mb = ib.window(x, y, window) / n;
            let va = iaa.window(x, y, window) / n - ma * ma;
            let vb = ibb.window(x, y, window) / n - mb * mb;
            let cov = iab.window(x, y, window) / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over every `window x window` position (stride 1, uniform
/// weights), computed per RGB channel and averaged.
pub fn ssim_with(a: &Rgb8Image, b: &Rgb8Image, window: usize) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(KinError::Shape(format!(
            "ssim: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if window == 0 || a.width() < window || a.height() < window {
        return Err(KinError::InvalidArgument(format!(
            "ssim window {window} does not fit a {}x{} image",
            a.width(),
            a.height()
        )));
    }
    let channel = |img: &Rgb8Image, c: usize| -> Vec<f64> {
        img.as_bytes().chunks_exact(3).map(|p| p[c] as f64).collect()
    };
    let total: f64 = (0..3)
        .map(|c| ssim_plane(&channel(a, c), &channel(b, c), a.width(), a.height(), window))
        .sum();
    Ok(total / 3.0)
}

pub fn ssim(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW)
}

/// Mean absolute difference across internal patch borders minus the same
/// quantity one pixel inside the patches.
///
/// For every internal vertical border at column `x` the border term is
/// `|I[x] - I[x-1]|` and the control terms are `|I[x+1] - I[x]|` and
/// `|I[x-1] - I[x-2]|`; horizontal borders are treated the same way along
/// rows. Values are averaged over all channels and positions. Seamless images
/// score near 0; visible tile edges score above 0.
pub fn seam_discrepancy(img: &Tensor, grid: &TileGrid) -> Result<f64> {
    let [b, c, h, w] = img.shape();
    let (oh, ow) = grid.output_dims();
    if b != 1 || (h, w) != (oh, ow) {
        return Err(KinError::Shape(format!(
            "image {:?} does not match grid output {oh}x{ow}",
            img.shape()
        )));
    }
    let p = grid.patch;
    let (mut seam, mut seam_n) = (0f64, 0usize);
    let (mut ctrl, mut ctrl_n) = (0f64, 0usize);
    for ch in 0..c {
        let plane = img.plane(0, ch);
        let at = |y: usize, x: usize| plane[y * w + x] as f64;
        for col in 1..grid.cols {
            let x = col * p;
            if x >= w {
                continue;
            }
            for y in 0..h {
                seam += (at(y, x) - at(y, x - 1)).abs();
                seam_n += 1;
                if x + 1 < w {
                    ctrl += (at(y, x + 1) - at(y, x)).abs();
                    ctrl_n += 1;
                }
                if x >= 2 {
                    ctrl += (at(y, x - 1) - at(y, x - 2)).abs();
                    ctrl_n += 1;
                }
            }
        }
        for row in 1..grid.rows {
            let y = row * p;
            if y >= h {
                continue;
            }
            for x in 0..w {
                seam += (at(y, x) - at(y - 1, x)).abs();
                seam_n += 1;
                if y + 1 < h {
                    ctrl += (at(y + 1, x) - at(y, x)).abs();
                    ctrl_n += 1;
                }
                if y >= 2 {
                    ctrl += (at(y - 1, x) - at(y - 2, x)).abs();
                    ctrl_n += 1;
                }
            }
        }
    }
    if seam_n == 0 {
        return Ok(0.0);
    }
    let control = if ctrl_n == 0 { 0.0 } else { ctrl / ctrl_n as f64 };
    Ok(seam / seam_n as f64 - control)
}

/// Cosine similarity, clamped to `[-1, 1]`. Two zero vectors are identical
/// (1); one zero vector against a nonzero one scores 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSimilarityRecord {
    pub layer_id: usize,
    pub a_row: usize,
    pub a_col: usize,
    pub b_row: usize,
    pub b_col: usize,
    /// Distance between patch origins in pixels.
    pub distance_px: f64,
    pub cos_mu: f64,
    pub cos_sigma: f64,
    pub euclid_mu: f64,
    pub euclid_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityOptions {
    /// 1-based layer ids to report; `None` reports every site.
    pub layers: Option<Vec<usize>>,
    /// Pairs farther apart than this (pixels) are skipped.
    pub max_distance_px: f64,
    pub include_self_pairs: bool,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        SimilarityOptions {
            layers: None,
            max_distance_px: 5000.0,
            include_self_pairs: true,
        }
    }
}

/// Compares every pair of patches within the distance cap at every
/// selected normalization site, using each patch's own statistics.
pub fn stats_similarity(
    gen: &Generator,
    image: &Tensor,
    grid: &TileGrid,
    opts: &SimilarityOptions,
) -> Result<Vec<StatSimilarityRecord>> {
    let coords = grid.coords();
    let probes: Vec<Vec<ProbeRecord>> = coords
        .iter()
        .map(|&c| gen.stat_probe(&extract_patch(image, grid, c)))
        .collect::<Result<_>>()?;
    let keep = |id: usize| opts.layers.as_ref().is_none_or(|l| l.contains(&id));
    let p = grid.patch as f64;
    let mut out = Vec::new();
    for (ia, &a) in coords.iter().enumerate() {
        for (ib, &b) in coords.iter().enumerate().skip(ia) {
            if ia == ib && !opts.include_self_pairs {
                continue;
            }
            let distance_px = patch_distance(a, b) * p;
            if distance_px > opts.max_distance_px {
                continue;
            }
            for (ra, rb) in probes[ia].iter().zip(&probes[ib]) {
                if !keep(ra.layer_id) {
                    continue;
                }
                out.push(StatSimilarityRecord {
                    layer_id: ra.layer_id,
                    a_row: a.0,
                    a_col: a.1,
                    b_row: b.0,
                    b_col: b.1,
                    distance_px,
                    cos_mu: cosine_similarity(&ra.mu, &rb.mu),
                    cos_sigma: cosine_similarity(&ra.sigma, &rb.sigma),
                    euclid_mu: euclidean(&ra.mu, &rb.mu),
                    euclid_sigma: euclidean(&ra.sigma, &rb.sigma),
                });
            }
        }
    }
    Ok(out)
}

/// Euclidean distance between two grid coordinates, in patches.
pub fn patch_distance(a: Coord, b: Coord) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}
