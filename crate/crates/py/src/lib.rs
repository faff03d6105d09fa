//! Python bindings. Images cross the boundary as packed RGB bytes, tensors
//! and statistics as flat lists.

use std::collections::BTreeMap;

use kintile_core::metrics;
use kintile_core::{
    Generator as CoreGenerator, GeneratorConfig, KernelKind, KinError, KinKernel, LayerStats,
    NamedArray, NormMode, RemainderPolicy, Rgb8Image, Tensor, TileGrid, TranslateOptions,
    WeightStore,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

/// `{name: (shape, values)}` as exchanged with Python.
type Arrays = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn err(e: KinError) -> PyErr {
    match e {
        KinError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn policy(name: &str) -> PyResult<RemainderPolicy> {
    match name {
        "strict-crop" => Ok(RemainderPolicy::StrictCrop),
        "pad-reflect" => Ok(RemainderPolicy::PadReflect),
        other => Err(PyValueError::new_err(format!("unknown policy `{other}`"))),
    }
}

fn kernel(kind: &str, size: usize, sigma: Option<f64>) -> PyResult<KinKernel> {
    let kind = match kind {
        "constant" => KernelKind::Constant,
        "gaussian" => KernelKind::Gaussian {
            sigma: sigma.unwrap_or(size as f64 / 3.0),
        },
        "global" => KernelKind::Global,
        other => return Err(PyValueError::new_err(format!("unknown kernel `{other}`"))),
    };
    KinKernel::build(kind, size).map_err(err)
}

fn mode(name: &str, kern: KinKernel) -> PyResult<NormMode> {
    Ok(match name {
        "full-in" => NormMode::FullIn,
        "patch-in" => NormMode::PatchIn,
        "tin" => NormMode::Tin,
        "kin" => NormMode::Kin(kern),
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    })
}

/// 8-bit RGB image.
#[pyclass(module = "kintile", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Image {
    inner: Rgb8Image,
}

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, data: &[u8]) -> PyResult<Self> {
        Rgb8Image::new(width, height, data.to_vec())
            .map(|inner| Image { inner })
            .map_err(err)
    }

    /// Reads a PNG or `.rgb` raw file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Rgb8Image::load(path).map(|inner| Image { inner }).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (width, height, seed=0))]
    fn synthetic_gradient(width: usize, height: usize, seed: u64) -> Self {
        Image {
            inner: kintile_core::synthetic_gradient(width, height, seed),
        }
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.as_bytes())
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<(u8, u8, u8)> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err("pixel out of range"));
        }
        let [r, g, b] = self.inner.pixel(x, y);
        Ok((r, g, b))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// ResNet generator with seeded or loaded weights.
#[pyclass(module = "kintile", frozen)]
struct Generator {
    inner: CoreGenerator,
}

#[pymethods]
impl Generator {
    #[staticmethod]
    #[pyo3(signature = (seed, base_width=64, n_res=9, patch=512))]
    fn from_seed(seed: u64, base_width: usize, n_res: usize, patch: usize) -> PyResult<Self> {
        let cfg = GeneratorConfig {
            base_width,
            n_resblocks: n_res,
            patch_size: patch,
            ..GeneratorConfig::default()
        };
        CoreGenerator::from_seed(cfg, seed)
            .map(|inner| Generator { inner })
            .map_err(err)
    }

    /// Loads a URW1 container; the architecture is read off tensor shapes.
    #[staticmethod]
    #[pyo3(signature = (path, patch=512))]
    fn from_weights(path: &str, patch: usize) -> PyResult<Self> {
        let store = WeightStore::load(path).map_err(err)?;
        let cfg = GeneratorConfig::infer_from_store(&store, patch).map_err(err)?;
        CoreGenerator::from_store(cfg, &store, false)
            .map(|inner| Generator { inner })
            .map_err(err)
    }

    fn save_weights(&self, path: &str) -> PyResult<()> {
        self.inner.to_store().save(path).map_err(err)
    }

    /// Canonical `(name, shape)` pairs in container order.
    fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.config().parameter_specs()
    }

    #[getter]
    fn norm_site_count(&self) -> usize {
        self.inner.config().norm_site_count()
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size()
    }

    /// Translates `image` and returns `(output, report)`; the report is a dict.
    #[pyo3(signature = (image, mode="kin", kernel="constant", kernel_size=3, gaussian_sigma=None, policy="pad-reflect", threads=1))]
    #[allow(clippy::too_many_arguments)]
    fn translate<'py>(
        &self,
        py: Python<'py>,
        image: &Image,
        mode: &str,
        kernel: &str,
        kernel_size: usize,
        gaussian_sigma: Option<f64>,
        policy: &str,
        threads: usize,
    ) -> PyResult<(Image, Bound<'py, PyAny>)> {
        let kern = if mode == "kin" {
            self::kernel(kernel, kernel_size, gaussian_sigma)?
        } else {
            KinKernel::global()
        };
        let mut opts = TranslateOptions::new(self::mode(mode, kern)?);
        opts.policy = self::policy(policy)?;
        opts.exec.threads = threads.max(1);
        let input = image.inner.to_tensor();
        let (out, report) = py
            .detach(|| kintile_core::translate(&input, &self.inner, &opts))
            .map_err(err)?;
        let out = Rgb8Image::from_tensor(&out).map_err(err)?;
        let json = serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let report = py.import("json")?.call_method1("loads", (json,))?;
        Ok((Image { inner: out }, report))
    }
}

/// Row-major kernel weights; empty for the global kernel.
#[pyfunction]
#[pyo3(signature = (kind, size, sigma=None))]
fn kernel_weights(kind: &str, size: usize, sigma: Option<f64>) -> PyResult<Vec<f64>> {
    Ok(kernel(kind, size, sigma)?.weights().to_vec())
}

/// Per-channel mean and population std of a `[C, H, W]` flat array.
#[pyfunction]
fn channel_stats(data: Vec<f32>, channels: usize, height: usize, width: usize) -> PyResult<(Vec<f32>, Vec<f32>)> {
    let t = Tensor::from_vec([1, channels, height, width], data).map_err(err)?;
    let LayerStats { mu, sigma } = LayerStats::of(&t);
    Ok((mu, sigma))
}

#[pyfunction]
fn histogram_correlation(a: &Image, b: &Image) -> f64 {
    metrics::histogram_correlation(&a.inner, &b.inner).value
}

#[pyfunction]
fn sobel_gradient(image: &Image) -> f64 {
    metrics::sobel_gradient_ycbcr(&image.inner)
}

#[pyfunction]
fn ssim(a: &Image, b: &Image) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(err)
}

/// Seam score of a translated image for the grid implied by the input size.
#[pyfunction]
#[pyo3(signature = (image, input_width, input_height, patch, policy="pad-reflect"))]
fn seam_discrepancy(
    image: &Image,
    input_width: usize,
    input_height: usize,
    patch: usize,
    policy: &str,
) -> PyResult<f64> {
    let grid = TileGrid::new(input_height, input_width, patch, self::policy(policy)?).map_err(err)?;
    metrics::seam_discrepancy(&image.inner.to_tensor(), &grid).map_err(err)
}

/// Reads a URW1 container into `{name: (shape, values)}`.
#[pyfunction]
fn read_weights(path: &str) -> PyResult<Arrays> {
    let store = WeightStore::load(path).map_err(err)?;
    Ok(store
        .iter()
        .map(|(name, a)| (name.to_string(), (a.dims.clone(), a.data.clone())))
        .collect())
}

/// Writes `{name: (shape, values)}` as a URW1 container.
#[pyfunction]
fn write_weights(path: &str, arrays: Arrays) -> PyResult<()> {
    let mut store = WeightStore::new();
    for (name, (dims, data)) in arrays {
        store.insert(name, NamedArray::new(dims, data).map_err(err)?);
    }
    store.save(path).map_err(err)
}

#[pymodule]
fn kintile(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(kernel_weights, m)?)?;
    m.add_function(wrap_pyfunction!(channel_stats, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(sobel_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(seam_discrepancy, m)?)?;
    m.add_function(wrap_pyfunction!(read_weights, m)?)?;
    m.add_function(wrap_pyfunction!(write_weights, m)?)?;
    Ok(())
}
