//! Tiled translation of arbitrarily large images.
//!
//! The image is cut into non-overlapping `P x P` patches addressed by
//! `(row, col)`. KIN runs a caching pass over every patch to fill the stat
//! tables, then an inference pass; TIN captures thumbnail statistics first;
//! patch-wise IN runs the inference pass only. Translated patches are written
//! back at the same coordinates.
//!
//! At most one patch's activations are live per worker, so peak tensor
//! memory depends on the patch size and architecture, not on the image size.
//! The input image and the assembled output are caller-owned buffers and are
//! not charged to the meter; stat tables are reported separately.

use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::generator::Generator;
use crate::normstrat::{Coord, NormMode, NormSession, Phase, StatTable};
use crate::ops::{bilinear_resize, mirror_index};
use crate::tensor::{MemoryMeter, Tensor};
use crate::weights::{NamedArray, WeightStore};

/// What to do with pixels past the last full patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemainderPolicy {
    /// Drop them; the output covers `floor(M/P)*P x floor(N/P)*P`.
    StrictCrop,
    /// Reflect-pad up to whole patches and crop the output back to `M x N`.
    #[default]
    PadReflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub policy: RemainderPolicy,
}

impl TileGrid {
    pub fn new(image_h: usize, image_w: usize, patch: usize, policy: RemainderPolicy) -> Result<Self> {
        if image_h == 0 || image_w == 0 || patch == 0 {
            return Err(KinError::InvalidArgument(
                "image and patch dimensions must be positive".into(),
            ));
        }
        let (rows, cols) = match policy {
            RemainderPolicy::StrictCrop => (image_h / patch, image_w / patch),
            RemainderPolicy::PadReflect => (image_h.div_ceil(patch), image_w.div_ceil(patch)),
        };
        if rows == 0 || cols == 0 {
            return Err(KinError::InvalidArgument(format!(
                "a {image_h}x{image_w} image holds no full {patch}x{patch} patch"
            )));
        }
        Ok(TileGrid {
            image_h,
            image_w,
            patch,
            rows,
            cols,
            policy,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major coordinates.
    pub fn coords(&self) -> Vec<Coord> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .collect()
    }

    /// Size of the assembled output.
    pub fn output_dims(&self) -> (usize, usize) {
        match self.policy {
            RemainderPolicy::StrictCrop => (self.rows * self.patch, self.cols * self.patch),
            RemainderPolicy::PadReflect => (self.image_h, self.image_w),
        }
    }

    pub fn origin(&self, (r, c): Coord) -> (usize, usize) {
        (r * self.patch, c * self.patch)
    }
}

/// Copies `h x w` pixels starting at `(top, left)`, mirroring any that fall
/// outside the image.
pub fn extract_region(image: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let [b, c, ih, iw] = image.shape();
    if top + h <= ih && left + w <= iw {
        return image.crop(top, left, h, w).expect("in bounds");
    }
    let cols: Vec<usize> = (left..left + w)
        .map(|x| mirror_index(x as isize, iw))
        .collect();
    let mut out = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            let plane = image.plane(bi, ci);
            for y in top..top + h {
                let row = &plane[mirror_index(y as isize, ih) * iw..][..iw];
                out.extend(cols.iter().map(|&x| row[x]));
            }
        }
    }
    Tensor::wrap([b, c, h, w], out)
}

pub fn extract_patch(image: &Tensor, grid: &TileGrid, coord: Coord) -> Tensor {
    let (y, x) = grid.origin(coord);
    extract_region(image, y, x, grid.patch, grid.patch)
}

/// Cuts `image` into patches.
pub fn tile<'a>(
    image: &'a Tensor,
    patch: usize,
    policy: RemainderPolicy,
) -> Result<(TileGrid, impl Iterator<Item = (Coord, Tensor)> + 'a)> {
    let grid = TileGrid::new(image.height(), image.width(), patch, policy)?;
    let iter = grid
        .coords()
        .into_iter()
        .map(move |c| (c, extract_patch(image, &grid, c)));
    Ok((grid, iter))
}

/// Order in which a sequential worker visits patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchOrder {
    #[default]
    RowMajor,
    ColumnMajor,
    Shuffled(u64),
}

impl PatchOrder {
    pub fn arrange(&self, grid: &TileGrid) -> Vec<Coord> {
        let mut coords = grid.coords();
        match *self {
            PatchOrder::RowMajor => {}
            PatchOrder::ColumnMajor => coords.sort_by_key(|&(r, c)| (c, r)),
            PatchOrder::Shuffled(seed) => coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
        coords
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// Worker count; 0 or 1 processes patches one at a time on the caller.
    pub threads: usize,
    pub order: PatchOrder,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            threads: 1,
            order: PatchOrder::RowMajor,
        }
    }
}

fn for_each_patch(
    grid: &TileGrid,
    exec: &ExecOptions,
    f: impl Fn(Coord) -> Result<()> + Sync + Send,
) -> Result<()> {
    let coords = exec.order.arrange(grid);
    if exec.threads <= 1 {
        return coords.into_iter().try_for_each(f);
    }
    let meter = crate::tensor::installed_meter();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exec.threads)
        .build()
        .map_err(|e| KinError::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        coords.par_iter().try_for_each(|&c| {
            let _guard = meter.as_ref().map(MemoryMeter::install);
            f(c)
        })
    })
}

/// Fills every KIN stat table from the patches of `image`.
pub fn cache_pass(
    image: &Tensor,
    gen: &Generator,
    grid: &TileGrid,
    session: &NormSession,
    exec: &ExecOptions,
) -> Result<()> {
    if !matches!(session.mode(), NormMode::Kin(_)) {
        return Err(KinError::InvalidArgument(format!(
            "the caching pass needs a KIN session, got {}",
            session.mode()
        )));
    }
    check_tables(session, grid)?;
    for_each_patch(grid, exec, |coord| {
        let patch = extract_patch(image, grid, coord);
        gen.forward(&patch, session, Some(coord), Phase::Caching)
            .map(drop)
    })
}

fn check_tables(session: &NormSession, grid: &TileGrid) -> Result<()> {
    for layer in session.layers() {
        let t = layer.table().ok_or(KinError::MissingPhase {
            mode: "KIN",
            phase: "table allocation",
        })?;
        if (t.rows(), t.cols()) != (grid.rows, grid.cols) {
            return Err(KinError::Shape(format!(
                "layer {} table is {}x{}, grid is {}x{}",
                layer.layer_id,
                t.rows(),
                t.cols(),
                grid.rows,
                grid.cols
            )));
        }
    }
    Ok(())
}

/// Captures TIN statistics from the whole image shrunk to one patch.
pub fn thumbnail_pass(image: &Tensor, gen: &Generator, session: &NormSession) -> Result<()> {
    let p = gen.patch_size();
    let thumb = bilinear_resize(image, p, p)?;
    gen.forward(&thumb, session, None, Phase::Caching).map(drop)
}

/// Translates every patch and hands it to `sink`. KIN requires a completed
/// caching pass.
pub fn infer_pass(
    image: &Tensor,
    gen: &Generator,
    grid: &TileGrid,
    session: &NormSession,
    exec: &ExecOptions,
    sink: &(dyn Fn(Coord, Tensor) -> Result<()> + Sync),
) -> Result<()> {
    if let NormMode::Kin(_) = session.mode() {
        check_tables(session, grid)?;
        if let Some((layer, cells)) = session.unfilled().into_iter().next() {
            return Err(KinError::Unfilled { layer, cells });
        }
    }
    for_each_patch(grid, exec, |coord| {
        let patch = extract_patch(image, grid, coord);
        let out = gen.forward(&patch, session, Some(coord), Phase::Inference)?;
        drop(patch);
        sink(coord, out)
    })
}

/// [`infer_pass`] collecting the translated patches in row-major order.
pub fn infer_patches(
    image: &Tensor,
    gen: &Generator,
    grid: &TileGrid,
    session: &NormSession,
    exec: &ExecOptions,
) -> Result<Vec<(Coord, Tensor)>> {
    let out = Mutex::new(Vec::with_capacity(grid.len()));
    infer_pass(image, gen, grid, session, exec, &|c, t| {
        out.lock().expect("patch list").push((c, t));
        Ok(())
    })?;
    let mut v = out.into_inner().expect("patch list");
    v.sort_by_key(|(c, _)| *c);
    Ok(v)
}

/// Writes translated patches into a planar output buffer.
struct Assembler {
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
    data: Mutex<Vec<f32>>,
}

impl Assembler {
    fn new(channels: usize, height: usize, width: usize, patch: usize) -> Self {
        Assembler {
            channels,
            height,
            width,
            patch,
            data: Mutex::new(vec![0.0; channels * height * width]),
        }
    }

    fn place(&self, (r, c): Coord, t: &Tensor) -> Result<()> {
        let (top, left) = (r * self.patch, c * self.patch);
        let h = self.patch.min(self.height.saturating_sub(top));
        let w = self.patch.min(self.width.saturating_sub(left));
        let mut data = self.data.lock().expect("assembly buffer");
        for ch in 0..self.channels {
            let src = t.plane(0, ch);
            let dst = &mut data[ch * self.height * self.width..][..self.height * self.width];
            for y in 0..h {
                dst[(top + y) * self.width + left..][..w]
                    .copy_from_slice(&src[y * t.width()..][..w]);
            }
        }
        Ok(())
    }

    fn finish(self) -> (usize, usize, usize, Vec<f32>) {
        let data = self.data.into_inner().expect("assembly buffer");
        (self.channels, self.height, self.width, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslateOptions {
    pub mode: NormMode,
    pub policy: RemainderPolicy,
    pub exec: ExecOptions,
    /// Full-image normalization refuses images whose estimated activation
    /// memory exceeds this many bytes.
    pub full_in_budget_bytes: u64,
}

impl TranslateOptions {
    pub fn new(mode: NormMode) -> Self {
        TranslateOptions {
            mode,
            policy: RemainderPolicy::default(),
            exec: ExecOptions::default(),
            full_in_budget_bytes: 1 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub image_h: usize,
    pub image_w: usize,
    pub output_h: usize,
    pub output_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub mode: String,
    pub kernel: Option<String>,
    pub policy: RemainderPolicy,
    pub threads: usize,
    pub caching_ms: f64,
    pub inference_ms: f64,
    pub peak_tensor_bytes: u64,
    pub table_bytes: u64,
    pub output_path: Option<String>,
}

/// Translates `image` (`[1, C, M, N]` in `[-1, 1]`).
pub fn translate(image: &Tensor, gen: &Generator, opts: &TranslateOptions) -> Result<(Tensor, TranslationReport)> {
    translate_session(image, gen, opts, None).map(|(t, r, _)| (t, r))
}

/// Like [`translate`], but returns the normalization session so KIN tables
/// can be persisted. A supplied KIN session whose tables are already full
/// skips the caching pass.
pub fn translate_session(
    image: &Tensor,
    gen: &Generator,
    opts: &TranslateOptions,
    session: Option<NormSession>,
) -> Result<(Tensor, TranslationReport, NormSession)> {
    let [b, c, m, n] = image.shape();
    if b != 1 || c != gen.config().in_channels {
        return Err(KinError::Shape(format!(
            "expected a [1, {}, M, N] image, got {:?}",
            gen.config().in_channels,
            image.shape()
        )));
    }
    let p = gen.patch_size();
    let grid = TileGrid::new(m, n, p, opts.policy)?;
    let (out_h, out_w) = grid.output_dims();
    let session = match session {
        Some(s) => {
            if s.mode() != &opts.mode {
                return Err(KinError::InvalidArgument(format!(
                    "session mode {} does not match requested {}",
                    s.mode(),
                    opts.mode
                )));
            }
            s
        }
        None => {
            let dims = matches!(opts.mode, NormMode::Kin(_)).then_some((grid.rows, grid.cols));
            gen.session(opts.mode.clone(), dims)?
        }
    };

    let meter = MemoryMeter::new();
    let assembler = Assembler::new(gen.config().out_channels, out_h, out_w, p);
    let mut caching_ms = 0.0;
    let start;
    {
        let _guard = meter.install();
        match &opts.mode {
            NormMode::FullIn => {
                let needed = gen.estimate_forward_bytes(out_h, out_w);
                if needed > opts.full_in_budget_bytes {
                    return Err(KinError::OverBudget {
                        needed,
                        budget: opts.full_in_budget_bytes,
                    });
                }
                start = Instant::now();
                let (h4, w4) = (out_h.div_ceil(4).max(2) * 4, out_w.div_ceil(4).max(2) * 4);
                let region = extract_region(image, 0, 0, h4, w4);
                let y = gen.forward_image(&region, &session, Phase::Inference)?;
                drop(region);
                let y = y.crop(0, 0, out_h, out_w)?;
                let mut data = assembler.data.lock().expect("assembly buffer");
                data.copy_from_slice(y.data());
            }
            NormMode::PatchIn => {
                start = Instant::now();
                infer_pass(image, gen, &grid, &session, &opts.exec, &|c, t| assembler.place(c, &t))?;
            }
            NormMode::Tin => {
                let t0 = Instant::now();
                thumbnail_pass(image, gen, &session)?;
                caching_ms = t0.elapsed().as_secs_f64() * 1e3;
                start = Instant::now();
                infer_pass(image, gen, &grid, &session, &opts.exec, &|c, t| assembler.place(c, &t))?;
            }
            NormMode::Kin(_) => {
                let t0 = Instant::now();
                let filled = session.unfilled().is_empty()
                    && session.layers().iter().all(|l| l.table().is_some_and(|t| t.filled_count() > 0));
                if !filled {
                    cache_pass(image, gen, &grid, &session, &opts.exec)?;
                }
                caching_ms = t0.elapsed().as_secs_f64() * 1e3;
                start = Instant::now();
                infer_pass(image, gen, &grid, &session, &opts.exec, &|c, t| assembler.place(c, &t))?;
            }
        }
    }
    let inference_ms = start.elapsed().as_secs_f64() * 1e3;
    let (ch, h, w, data) = assembler.finish();
    let output = Tensor::from_vec([1, ch, h, w], data)?;
    let report = TranslationReport {
        image_h: m,
        image_w: n,
        output_h: out_h,
        output_w: out_w,
        rows: grid.rows,
        cols: grid.cols,
        patch_size: p,
        mode: opts.mode.name().to_owned(),
        kernel: opts.mode.kernel().map(|k| k.to_string()),
        policy: opts.policy,
        threads: opts.exec.threads.max(1),
        caching_ms,
        inference_ms,
        peak_tensor_bytes: meter.peak_bytes(),
        table_bytes: session.table_bytes(),
        output_path: None,
    };
    Ok((output, report, session))
}

/// Serializes every KIN table as `layer{id}.mu` / `layer{id}.sigma`
/// entries of shape `[rows, cols, C]`.
pub fn tables_to_store(session: &NormSession) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    for layer in session.layers() {
        let Some(t) = layer.table() else {
            return Err(KinError::InvalidArgument(
                "only KIN sessions carry stat tables".into(),
            ));
        };
        let (mu, sigma) = t.to_arrays(layer.layer_id)?;
        let dims = vec![t.rows(), t.cols(), t.channels()];
        store.insert(format!("layer{}.mu", layer.layer_id), NamedArray::new(dims.clone(), mu)?);
        store.insert(format!("layer{}.sigma", layer.layer_id), NamedArray::new(dims, sigma)?);
    }
    Ok(store)
}

/// Installs tables read from a sidecar store into a KIN session.
pub fn tables_from_store(session: &mut NormSession, store: &WeightStore) -> Result<()> {
    for layer in session.layers_mut() {
        let id = layer.layer_id;
        let get = |suffix: &str| {
            let name = format!("layer{id}.{suffix}");
            store
                .get(&name)
                .ok_or(KinError::MissingParameter(name))
        };
        let (mu, sigma) = (get("mu")?, get("sigma")?);
        if mu.dims.len() != 3 || mu.dims != sigma.dims {
            return Err(KinError::ParameterShape {
                name: format!("layer{id}.sigma"),
                expected: mu.dims.clone(),
                found: sigma.dims.clone(),
            });
        }
        let table = StatTable::from_arrays(mu.dims[0], mu.dims[1], mu.dims[2], &mu.data, &sigma.data)?;
        layer.set_table(table)?;
    }
    Ok(())
}
