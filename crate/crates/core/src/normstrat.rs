//! Instance-normalization strategies for tiled inference.
//!
//! Four ways of choosing the `(mu, sigma)` each normalization layer divides
//! by when an image is processed as independent patches:
//!
//! * [`NormMode::FullIn`]: the whole image is one instance (small-image oracle).
//! * [`NormMode::PatchIn`]: every patch uses its own statistics.
//! * [`NormMode::Tin`]: every patch uses statistics captured from a thumbnail.
//! * [`NormMode::Kin`]: a caching pass stores every patch's statistics in a
//!   per-layer [`StatTable`]; the inference pass normalizes patch `(i, j)`
//!   with the table convolved by a [`KinKernel`] centered on `(i, j)`, with
//!   table indices clamped to the border (edge-value padding).

use std::fmt;
use std::sync::{OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::ops::{channel_stats, normalize_with_stats};
use crate::tensor::Tensor;

/// Denominator floor used by every normalization layer.
pub const DEFAULT_EPS: f32 = 1e-5;

/// Patch coordinate `(row, col)` in the tile grid.
pub type Coord = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelKind {
    Constant,
    Gaussian { sigma: f64 },
    /// Uniform average over every cell of the table.
    Global,
}

/// Spatial weights applied to a stat table.
#[derive(Debug, Clone, PartialEq)]
pub struct KinKernel {
    kind: KernelKind,
    size: usize,
    /// Row-major `size x size`; empty for [`KernelKind::Global`].
    weights: Vec<f64>,
}

impl KinKernel {
    pub fn constant(size: usize) -> Result<Self> {
        Self::build(KernelKind::Constant, size)
    }

    /// Gaussian kernel with the default spread of `size / 3`.
    pub fn gaussian(size: usize) -> Result<Self> {
        Self::build(
            KernelKind::Gaussian {
                sigma: size as f64 / 3.0,
            },
            size,
        )
    }

    pub fn global() -> Self {
        KinKernel {
            kind: KernelKind::Global,
            size: 0,
            weights: Vec::new(),
        }
    }

    pub fn build(kind: KernelKind, size: usize) -> Result<Self> {
        if let KernelKind::Global = kind {
            return Ok(Self::global());
        }
        if size == 0 || size.is_multiple_of(2) {
            return Err(KinError::InvalidArgument(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        let q = (size / 2) as isize;
        let weights = match kind {
            KernelKind::Constant => vec![1.0 / (size * size) as f64; size * size],
            KernelKind::Gaussian { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(KinError::InvalidArgument(format!(
                        "gaussian sigma must be positive, got {sigma}"
                    )));
                }
                let mut w = Vec::with_capacity(size * size);
                for du in -q..=q {
                    for dv in -q..=q {
                        let r2 = (du * du + dv * dv) as f64;
                        w.push((-r2 / (2.0 * sigma * sigma)).exp());
                    }
                }
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
                w
            }
            KernelKind::Global => unreachable!(),
        };
        Ok(KinKernel {
            kind,
            size,
            weights,
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Side length `2q + 1`; 0 for the global kernel.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn half_width(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, du: isize, dv: isize) -> f64 {
        let q = self.half_width() as isize;
        self.weights[((du + q) * self.size as isize + (dv + q)) as usize]
    }

    pub fn is_global(&self) -> bool {
        matches!(self.kind, KernelKind::Global)
    }
}

impl fmt::Display for KinKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            KernelKind::Constant => write!(f, "constant-{}", self.size),
            KernelKind::Gaussian { sigma } => write!(f, "gaussian-{}(sigma={sigma})", self.size),
            KernelKind::Global => write!(f, "global"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormMode {
    FullIn,
    PatchIn,
    Tin,
    Kin(KinKernel),
}

impl NormMode {
    pub fn name(&self) -> &'static str {
        match self {
            NormMode::FullIn => "full-in",
            NormMode::PatchIn => "patch-in",
            NormMode::Tin => "tin",
            NormMode::Kin(_) => "kin",
        }
    }

    pub fn kernel(&self) -> Option<&KinKernel> {
        match self {
            NormMode::Kin(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormMode::Kin(k) => write!(f, "kin[{k}]"),
            other => f.write_str(other.name()),
        }
    }
}

/// Which pass a forward call belongs to.
///
/// For KIN the caching phase fills the stat tables, for TIN it captures the
/// thumbnail statistics. Both normalize with the features' own statistics
/// while doing so.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Caching,
    Inference,
}

/// Per-channel statistics of one patch at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl LayerStats {
    /// Stats of a batch-1 feature map.
    pub fn of(features: &Tensor) -> Self {
        let s = channel_stats(features);
        LayerStats {
            mu: s.mu,
            sigma: s.sigma,
        }
    }
}

/// Write-once grid of per-patch statistics for one normalization layer.
#[derive(Debug)]
pub struct StatTable {
    rows: usize,
    cols: usize,
    channels: usize,
    cells: Vec<OnceLock<LayerStats>>,
}

impl StatTable {
    pub fn new(rows: usize, cols: usize, channels: usize) -> Self {
        StatTable {
            rows,
            cols,
            channels,
            cells: (0..rows * cols).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, (row, col): Coord) -> Result<usize> {
        if row >= self.rows || col >= self.cols {
            return Err(KinError::OutOfBounds {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(row * self.cols + col)
    }

    /// Stores a cell. `layer` only labels the error.
    pub fn write(&self, layer: usize, coord: Coord, stats: LayerStats) -> Result<()> {
        let idx = self.check(coord)?;
        if stats.mu.len() != self.channels || stats.sigma.len() != self.channels {
            return Err(KinError::Shape(format!(
                "layer {layer}: table holds {} channels, got {}",
                self.channels,
                stats.mu.len()
            )));
        }
        self.cells[idx].set(stats).map_err(|_| KinError::DoubleWrite {
            layer,
            row: coord.0,
            col: coord.1,
        })
    }

    pub fn get(&self, coord: Coord) -> Result<Option<&LayerStats>> {
        Ok(self.cells[self.check(coord)?].get())
    }

    pub fn is_filled(&self, coord: Coord) -> bool {
        self.check(coord)
            .map(|i| self.cells[i].get().is_some())
            .unwrap_or(false)
    }

    pub fn filled_count(&self) -> usize {
        self.cells.iter().filter(|c| c.get().is_some()).count()
    }

    pub fn unfilled(&self) -> Vec<Coord> {
        (0..self.rows * self.cols)
            .filter(|&i| self.cells[i].get().is_none())
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }

    /// Row-major `[rows, cols, C]` mu and sigma buffers; every cell must be filled.
    pub fn to_arrays(&self, layer: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let unfilled = self.unfilled();
        if !unfilled.is_empty() {
            return Err(KinError::Unfilled {
                layer,
                cells: unfilled,
            });
        }
        let mut mu = Vec::with_capacity(self.cells.len() * self.channels);
        let mut sigma = Vec::with_capacity(self.cells.len() * self.channels);
        for c in &self.cells {
            let s = c.get().expect("checked above");
            mu.extend_from_slice(&s.mu);
            sigma.extend_from_slice(&s.sigma);
        }
        Ok((mu, sigma))
    }

    /// Rebuilds a fully filled table from `[rows, cols, C]` buffers.
    pub fn from_arrays(
        rows: usize,
        cols: usize,
        channels: usize,
        mu: &[f32],
        sigma: &[f32],
    ) -> Result<Self> {
        let n = rows * cols * channels;
        if mu.len() != n || sigma.len() != n {
            return Err(KinError::Shape(format!(
                "stat table {rows}x{cols}x{channels} needs {n} values, got {} / {}",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(KinError::InvalidArgument(
                "stat table sigma must be finite and non-negative".into(),
            ));
        }
        let table = StatTable::new(rows, cols, channels);
        for (i, cell) in table.cells.iter().enumerate() {
            let r = i * channels..(i + 1) * channels;
            let _ = cell.set(LayerStats {
                mu: mu[r.clone()].to_vec(),
                sigma: sigma[r].to_vec(),
            });
        }
        Ok(table)
    }

    pub fn size_bytes(&self) -> u64 {
        (2 * self.cells.len() * self.channels * std::mem::size_of::<f32>()) as u64
    }
}

/// One normalization site: affine parameters plus whatever the active mode
/// needs to remember between passes.
#[derive(Debug)]
pub struct NormLayerState {
    pub layer_id: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
    table: Option<StatTable>,
    thumbnail: RwLock<Option<LayerStats>>,
}

impl NormLayerState {
    pub fn new(layer_id: usize, gamma: Vec<f32>, beta: Vec<f32>) -> Self {
        NormLayerState {
            layer_id,
            gamma,
            beta,
            eps: DEFAULT_EPS,
            table: None,
            thumbnail: RwLock::new(None),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn with_table(mut self, rows: usize, cols: usize) -> Self {
        self.table = Some(StatTable::new(rows, cols, self.channels()));
        self
    }

    pub fn table(&self) -> Option<&StatTable> {
        self.table.as_ref()
    }

    pub fn set_table(&mut self, table: StatTable) -> Result<()> {
        if table.channels() != self.channels() {
            return Err(KinError::Shape(format!(
                "layer {}: table has {} channels, layer has {}",
                self.layer_id,
                table.channels(),
                self.channels()
            )));
        }
        self.table = Some(table);
        Ok(())
    }

    fn require_table(&self) -> Result<&StatTable> {
        self.table.as_ref().ok_or(KinError::MissingPhase {
            mode: "KIN",
            phase: "table allocation",
        })
    }

    pub fn thumbnail_stats(&self) -> Option<LayerStats> {
        self.thumbnail.read().expect("thumbnail lock").clone()
    }

    /// Overrides the stats TIN normalizes with.
    pub fn set_thumbnail_stats(&self, stats: LayerStats) {
        *self.thumbnail.write().expect("thumbnail lock") = Some(stats);
    }

    fn own_stats(&self, features: &Tensor) -> Result<Tensor> {
        let s = channel_stats(features);
        normalize_with_stats(features, &s.mu, &s.sigma, &self.gamma, &self.beta, self.eps)
    }

    fn normalize_single(&self, features: &Tensor, stats: &LayerStats) -> Result<Tensor> {
        if features.batch() != 1 {
            return Err(KinError::Shape(format!(
                "layer {}: stored statistics apply to batch 1, got batch {}",
                self.layer_id,
                features.batch()
            )));
        }
        normalize_with_stats(
            features,
            &stats.mu,
            &stats.sigma,
            &self.gamma,
            &self.beta,
            self.eps,
        )
    }

    /// Records the features' statistics at `coord`, then normalizes them
    /// with those same statistics.
    pub fn cache_stats(&self, features: &Tensor, coord: Coord) -> Result<Tensor> {
        let table = self.require_table()?;
        let stats = LayerStats::of(features);
        let out = self.normalize_single(features, &stats)?;
        table.write(self.layer_id, coord, stats)?;
        Ok(out)
    }

    /// Kernel-weighted statistics around `coord`, clamping table indices to
    /// the border.
    pub fn kin_stats(&self, coord: Coord, kernel: &KinKernel) -> Result<LayerStats> {
        let table = self.require_table()?;
        table.check(coord)?;
        let c = table.channels();
        let mut mu = vec![0f64; c];
        let mut sigma = vec![0f64; c];

        if kernel.is_global() {
            let unfilled = table.unfilled();
            if !unfilled.is_empty() {
                return Err(KinError::Unfilled {
                    layer: self.layer_id,
                    cells: unfilled,
                });
            }
            for cell in &table.cells {
                let s = cell.get().expect("checked above");
                for k in 0..c {
                    mu[k] += s.mu[k] as f64;
                    sigma[k] += s.sigma[k] as f64;
                }
            }
            let n = table.cells.len() as f64;
            return Ok(LayerStats {
                mu: mu.iter().map(|v| (v / n) as f32).collect(),
                sigma: sigma.iter().map(|v| (v / n) as f32).collect(),
            });
        }

        let q = kernel.half_width() as isize;
        let (rows, cols) = (table.rows() as isize, table.cols() as isize);
        let mut missing = Vec::new();
        for du in -q..=q {
            let r = (coord.0 as isize + du).clamp(0, rows - 1) as usize;
            for dv in -q..=q {
                let cc = (coord.1 as isize + dv).clamp(0, cols - 1) as usize;
                let Some(s) = table.cells[r * table.cols() + cc].get() else {
                    if !missing.contains(&(r, cc)) {
                        missing.push((r, cc));
                    }
                    continue;
                };
                let w = kernel.weight(du, dv);
                for k in 0..c {
                    mu[k] += w * s.mu[k] as f64;
                    sigma[k] += w * s.sigma[k] as f64;
                }
            }
        }
        if !missing.is_empty() {
            return Err(KinError::Unfilled {
                layer: self.layer_id,
                cells: missing,
            });
        }
        Ok(LayerStats {
            mu: mu.into_iter().map(|v| v as f32).collect(),
            sigma: sigma.into_iter().map(|v| v as f32).collect(),
        })
    }

    pub fn tin_capture(&self, thumbnail_features: &Tensor) {
        self.set_thumbnail_stats(LayerStats::of(thumbnail_features));
    }

    pub fn apply(
        &self,
        features: &Tensor,
        coord: Option<Coord>,
        mode: &NormMode,
        phase: Phase,
    ) -> Result<Tensor> {
        match (mode, phase) {
            (NormMode::FullIn | NormMode::PatchIn, _) => self.own_stats(features),
            (NormMode::Tin, Phase::Caching) => {
                let stats = LayerStats::of(features);
                let out = self.normalize_single(features, &stats)?;
                self.set_thumbnail_stats(stats);
                Ok(out)
            }
            (NormMode::Tin, Phase::Inference) => {
                let stats = self.thumbnail_stats().ok_or(KinError::MissingPhase {
                    mode: "TIN",
                    phase: "thumbnail capture",
                })?;
                self.normalize_single(features, &stats)
            }
            (NormMode::Kin(_), Phase::Caching) => {
                let coord = coord.ok_or_else(|| {
                    KinError::InvalidArgument("KIN needs a patch coordinate".into())
                })?;
                self.cache_stats(features, coord)
            }
            (NormMode::Kin(kernel), Phase::Inference) => {
                let coord = coord.ok_or_else(|| {
                    KinError::InvalidArgument("KIN needs a patch coordinate".into())
                })?;
                let table = self.require_table()?;
                if table.filled_count() == 0 {
                    return Err(KinError::MissingPhase {
                        mode: "KIN",
                        phase: "caching",
                    });
                }
                let stats = self.kin_stats(coord, kernel)?;
                self.normalize_single(features, &stats)
            }
        }
    }
}

/// Normalization state for every site of a generator under one mode.
#[derive(Debug)]
pub struct NormSession {
    mode: NormMode,
    layers: Vec<NormLayerState>,
}

impl NormSession {
    /// `params` holds `(gamma, beta)` per site in site order; `grid` sizes the
    /// KIN tables.
    pub fn new(mode: NormMode, params: &[(Vec<f32>, Vec<f32>)], grid: Option<(usize, usize)>) -> Result<Self> {
        let layers = params
            .iter()
            .enumerate()
            .map(|(i, (g, b))| {
                let layer = NormLayerState::new(i + 1, g.clone(), b.clone());
                match (&mode, grid) {
                    (NormMode::Kin(_), Some((r, c))) => Ok(layer.with_table(r, c)),
                    (NormMode::Kin(_), None) => Err(KinError::InvalidArgument(
                        "KIN session needs the tile grid dimensions".into(),
                    )),
                    _ => Ok(layer),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NormSession { mode, layers })
    }

    pub fn mode(&self) -> &NormMode {
        &self.mode
    }

    pub fn layers(&self) -> &[NormLayerState] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NormLayerState] {
        &mut self.layers
    }

    /// Site by 1-based layer id.
    pub fn layer(&self, layer_id: usize) -> Option<&NormLayerState> {
        layer_id.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    pub fn table_bytes(&self) -> u64 {
        self.layers
            .iter()
            .filter_map(|l| l.table())
            .map(StatTable::size_bytes)
            .sum()
    }

    /// Every unfilled cell across all tables, as `(layer, cells)`.
    pub fn unfilled(&self) -> Vec<(usize, Vec<Coord>)> {
        self.layers
            .iter()
            .filter_map(|l| l.table().map(|t| (l.layer_id, t.unfilled())))
            .filter(|(_, cells)| !cells.is_empty())
            .collect()
    }

    pub fn apply(
        &self,
        site: usize,
        features: &Tensor,
        coord: Option<Coord>,
        phase: Phase,
    ) -> Result<Tensor> {
        let layer = self.layers.get(site).ok_or_else(|| {
            KinError::InvalidArgument(format!("no normalization site {site}"))
        })?;
        layer.apply(features, coord, &self.mode, phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_from(rows: usize, cols: usize, mu: &[f32]) -> NormLayerState {
        let mut layer = NormLayerState::new(1, vec![1.0], vec![0.0]);
        layer
            .set_table(StatTable::from_arrays(rows, cols, 1, mu, &vec![0.5; mu.len()]).unwrap())
            .unwrap();
        layer
    }

    #[test]
    fn constant_kernel_weights() {
        let k = KinKernel::constant(3).unwrap();
        assert_eq!(k.weights(), &[1.0 / 9.0; 9]);
        assert_eq!(KinKernel::gaussian(1).unwrap().weights(), &[1.0]);
    }

    #[test]
    fn gaussian_matches_closed_form() {
        let k = KinKernel::gaussian(3).unwrap();
        // independent evaluation with sigma = 1
        let raw: Vec<f64> = (-1i32..=1)
            .flat_map(|u| (-1i32..=1).map(move |v| (-((u * u + v * v) as f64) / 2.0).exp()))
            .collect();
        let total: f64 = raw.iter().sum();
        for (a, b) in k.weights().iter().zip(raw.iter().map(|v| v / total)) {
            assert!((a - b).abs() < 1e-15);
        }
        // center weight 1/(1 + 4e^-0.5 + 4e^-1)
        let center = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        assert!((k.weight(0, 0) - center).abs() < 1e-15);
    }

    #[test]
    fn kernel_rejects_even_or_zero() {
        assert!(KinKernel::constant(0).is_err());
        assert!(KinKernel::constant(4).is_err());
        assert!(KinKernel::gaussian(2).is_err());
        assert!(KinKernel::build(KernelKind::Gaussian { sigma: 0.0 }, 3).is_err());
    }

    #[test]
    fn kernels_sum_to_one() {
        for size in [1, 3, 5, 7, 11] {
            for k in [KinKernel::constant(size).unwrap(), KinKernel::gaussian(size).unwrap()] {
                let s: f64 = k.weights().iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{k}");
            }
        }
    }

    #[test]
    fn gaussian_is_dihedrally_symmetric() {
        let k = KinKernel::gaussian(7).unwrap();
        let q = 3isize;
        for u in -q..=q {
            for v in -q..=q {
                let w = k.weight(u, v);
                assert_eq!(w, k.weight(v, -u));
                assert_eq!(w, k.weight(-u, v));
                assert_eq!(w, k.weight(v, u));
            }
        }
    }

    #[test]
    fn cache_constant_patch() {
        let layer = NormLayerState::new(1, vec![1.0; 2], vec![0.0; 2]).with_table(2, 2);
        layer
            .cache_stats(&Tensor::full([1, 2, 4, 4], 5.0), (0, 0))
            .unwrap();
        let cell = layer.table().unwrap().get((0, 0)).unwrap().unwrap();
        assert_eq!(cell.mu, vec![5.0, 5.0]);
        assert_eq!(cell.sigma, vec![0.0, 0.0]);
    }

    #[test]
    fn cache_bookkeeping_and_errors() {
        let layer = NormLayerState::new(3, vec![1.0], vec![0.0]).with_table(2, 2);
        let a = Tensor::full([1, 1, 2, 2], 1.0);
        let b = Tensor::full([1, 1, 2, 2], 2.0);
        layer.cache_stats(&a, (0, 0)).unwrap();
        layer.cache_stats(&b, (0, 1)).unwrap();
        let t = layer.table().unwrap();
        assert_eq!(t.filled_count(), 2);
        assert_eq!(t.unfilled(), vec![(1, 0), (1, 1)]);
        assert!(matches!(
            layer.cache_stats(&a, (0, 0)),
            Err(KinError::DoubleWrite { layer: 3, row: 0, col: 0 })
        ));
        assert!(matches!(
            layer.cache_stats(&a, (2, 0)),
            Err(KinError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn kin_stats_corner_edge_padding() {
        let layer = table_from(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k = KinKernel::constant(3).unwrap();
        // clamped neighborhood [[1,1,2],[1,1,2],[3,3,4]] averages to 2
        let s = layer.kin_stats((0, 0), &k).unwrap();
        assert!((s.mu[0] - 2.0).abs() < 1e-6);
        assert!((s.sigma[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kin_stats_delta_and_global() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        let layer = table_from(2, 2, &vals);
        let delta = KinKernel::constant(1).unwrap();
        for (i, v) in vals.iter().enumerate() {
            let s = layer.kin_stats((i / 2, i % 2), &delta).unwrap();
            assert_eq!(s.mu[0], *v);
        }
        for i in 0..4 {
            let s = layer.kin_stats((i / 2, i % 2), &KinKernel::global()).unwrap();
            assert_eq!(s.mu[0], 2.5);
        }
    }

    #[test]
    fn kin_stats_unfilled_errors() {
        let layer = NormLayerState::new(2, vec![1.0], vec![0.0]).with_table(1, 3);
        layer
            .cache_stats(&Tensor::full([1, 1, 2, 2], 1.0), (0, 0))
            .unwrap();
        let err = layer.kin_stats((0, 0), &KinKernel::constant(3).unwrap()).unwrap_err();
        match err {
            KinError::Unfilled { layer, cells } => {
                assert_eq!(layer, 2);
                assert_eq!(cells, vec![(0, 1)]);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(layer.kin_stats((0, 0), &KinKernel::global()).is_err());
    }

    #[test]
    fn apply_reports_missing_phase() {
        let layer = NormLayerState::new(1, vec![1.0], vec![0.0]).with_table(1, 1);
        let x = Tensor::full([1, 1, 2, 2], 1.0);
        let err = layer
            .apply(&x, Some((0, 0)), &NormMode::Kin(KinKernel::global()), Phase::Inference)
            .unwrap_err();
        assert!(err.to_string().contains("caching"));
        let err = layer.apply(&x, None, &NormMode::Tin, Phase::Inference).unwrap_err();
        assert!(err.to_string().contains("thumbnail"));
    }

    #[test]
    fn tin_capture_constant_and_self_normalization() {
        let layer = NormLayerState::new(1, vec![1.0], vec![0.0]);
        layer.tin_capture(&Tensor::full([1, 1, 3, 3], 3.0));
        let s = layer.thumbnail_stats().unwrap();
        assert_eq!((s.mu[0], s.sigma[0]), (3.0, 0.0));

        let thumb =
            Tensor::from_vec([1, 1, 2, 3], vec![0.1, -0.4, 2.0, 0.7, 1.3, -1.1]).unwrap();
        layer.tin_capture(&thumb);
        let out = layer.apply(&thumb, None, &NormMode::Tin, Phase::Inference).unwrap();
        let (m, sd) = crate::ops::mean_std(out.data());
        assert!(m.abs() < 1e-6);
        assert!((sd - 1.0).abs() < 1e-5);
    }

    #[test]
    fn patch_in_equals_kin_delta() {
        let x = Tensor::from_vec([1, 2, 2, 2], vec![0.3, 1.0, -2.0, 0.5, 4.0, 4.5, 3.0, 5.0]).unwrap();
        let layer = NormLayerState::new(1, vec![1.5, 0.5], vec![0.1, -0.2]).with_table(1, 1);
        let mode = NormMode::Kin(KinKernel::constant(1).unwrap());
        layer.apply(&x, Some((0, 0)), &mode, Phase::Caching).unwrap();
        let kin = layer.apply(&x, Some((0, 0)), &mode, Phase::Inference).unwrap();
        let pin = layer.apply(&x, None, &NormMode::PatchIn, Phase::Inference).unwrap();
        assert!(kin.max_abs_diff(&pin) < 1e-6);
    }
}
