//! Dense 4-D `f32` tensors with byte-level memory accounting.
//!
//! Every [`Tensor`] created while a [`MemoryMeter`] is installed on the
//! current thread charges its buffer to that meter and refunds it on drop,
//! regardless of which thread performs the drop. Tensors created with no
//! meter installed are not tracked.

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{KinError, Result};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

#[derive(Debug, Default)]
struct MeterInner {
    current: AtomicU64,
    peak: AtomicU64,
}

impl MeterInner {
    fn charge(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn refund(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }
}

thread_local! {
    static ACTIVE_METER: RefCell<Option<Arc<MeterInner>>> = const { RefCell::new(None) };
}

/// Tracks live and peak tensor bytes.
#[derive(Clone, Default)]
pub struct MemoryMeter {
    inner: Arc<MeterInner>,
}

impl fmt::Debug for MemoryMeter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryMeter")
            .field("current_bytes", &self.current_bytes())
            .field("peak_bytes", &self.peak_bytes())
            .finish()
    }
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current_bytes(&self) -> u64 {
        self.inner.current.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.inner.peak.load(Ordering::SeqCst)
    }

    /// Resets the peak to the current live byte count.
    pub fn reset_peak(&self) {
        self.inner
            .peak
            .store(self.current_bytes(), Ordering::SeqCst);
    }

    /// Makes this meter the allocation hook for the calling thread until the
    /// guard is dropped. Guards nest.
    pub fn install(&self) -> MeterGuard {
        let previous = ACTIVE_METER.with(|m| m.replace(Some(self.inner.clone())));
        MeterGuard { previous }
    }
}

/// Restores the previously installed meter on drop.
pub struct MeterGuard {
    previous: Option<Arc<MeterInner>>,
}

impl Drop for MeterGuard {
    fn drop(&mut self) {
        let previous = self.previous.take();
        ACTIVE_METER.with(|m| *m.borrow_mut() = previous);
    }
}

fn active_meter() -> Option<Arc<MeterInner>> {
    ACTIVE_METER.with(|m| m.borrow().clone())
}

/// The meter installed on the calling thread, if any.
pub fn installed_meter() -> Option<MemoryMeter> {
    active_meter().map(|inner| MemoryMeter { inner })
}

/// Row-major `(B, C, H, W)` tensor of 32-bit floats.
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    meter: Option<Arc<MeterInner>>,
    charged: u64,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(KinError::Shape(format!(
                "buffer of {} values cannot have shape {shape:?} ({len} values)",
                data.len()
            )));
        }
        Ok(Self::wrap(shape, data))
    }

    pub(crate) fn wrap(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let meter = active_meter();
        let charged = (data.len() * std::mem::size_of::<f32>()) as u64;
        if let Some(m) = &meter {
            m.charge(charged);
        }
        Tensor {
            shape,
            data,
            meter,
            charged,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self::wrap(shape, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn size_bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f32>()) as u64
    }

    /// Takes the buffer out; the meter is refunded.
    pub fn into_vec(mut self) -> Vec<f32> {
        std::mem::take(&mut self.data)
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((b * cc + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, y, x)]
    }

    /// The `H*W` plane of `(b, c)`.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Returns a tensor with the same shape and `f` applied elementwise.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::wrap(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise map that reuses this tensor's buffer.
    pub fn map_in_place(mut self, f: impl Fn(f32) -> f32) -> Tensor {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Copies a `height x width` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.shape;
        if top + height > h || left + width > w {
            return Err(KinError::Shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
            )));
        }
        let mut out = Vec::with_capacity(b * c * height * width);
        for bi in 0..b {
            for ci in 0..c {
                let plane = self.plane(bi, ci);
                for y in top..top + height {
                    out.extend_from_slice(&plane[y * w + left..y * w + left + width]);
                }
            }
        }
        Ok(Tensor::wrap([b, c, height, width], out))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::wrap(self.shape, self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        if let Some(m) = &self.meter {
            m.refund(self.charged);
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_buffer_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn meter_tracks_live_and_peak_bytes() {
        let meter = MemoryMeter::new();
        {
            let _g = meter.install();
            let a = Tensor::zeros([1, 1, 4, 4]);
            assert_eq!(meter.current_bytes(), 64);
            let b = a.clone();
            assert_eq!(meter.current_bytes(), 128);
            drop(a);
            drop(b);
        }
        assert_eq!(meter.current_bytes(), 0);
        assert_eq!(meter.peak_bytes(), 128);
        assert!(meter.peak_bytes() >= meter.current_bytes());
    }

    #[test]
    fn untracked_outside_scope() {
        let meter = MemoryMeter::new();
        let t = Tensor::zeros([1, 1, 8, 8]);
        {
            let _g = meter.install();
            drop(t);
        }
        assert_eq!(meter.peak_bytes(), 0);
        assert_eq!(meter.current_bytes(), 0);
    }

    #[test]
    fn refund_on_foreign_thread() {
        let meter = MemoryMeter::new();
        let t = {
            let _g = meter.install();
            Tensor::zeros([1, 2, 4, 4])
        };
        std::thread::spawn(move || drop(t)).join().unwrap();
        assert_eq!(meter.current_bytes(), 0);
        assert_eq!(meter.peak_bytes(), 128);
    }

    #[test]
    fn into_vec_refunds() {
        let meter = MemoryMeter::new();
        let _g = meter.install();
        let v = Tensor::full([1, 1, 2, 2], 3.0).into_vec();
        assert_eq!(v, vec![3.0; 4]);
        assert_eq!(meter.current_bytes(), 0);
    }

    #[test]
    fn crop_extracts_window() {
        let t = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let c = t.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(t.crop(2, 2, 2, 2).is_err());
    }
}
