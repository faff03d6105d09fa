use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kintile_core::{
    ExecOptions, Generator, GeneratorConfig, KernelKind, KinKernel, NormMode, PatchOrder,
    RemainderPolicy, WeightStore,
};
use serde::{Deserialize, Serialize};

/// Bad flags or an unusable configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Everything that determines a run. Written next to every output so the
/// run can be repeated with `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub seed: Option<u64>,
    pub base_width: usize,
    pub n_res: usize,
    pub patch: usize,
    pub mode: String,
    pub kernel: String,
    pub kernel_size: usize,
    pub gaussian_sigma: Option<f64>,
    pub policy: RemainderPolicy,
    pub threads: usize,
    pub order: String,
    pub order_seed: u64,
    pub save_tables: Option<PathBuf>,
    pub load_tables: Option<PathBuf>,
    pub full_in_budget: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subcommand: "translate".into(),
            input: None,
            output: None,
            report: None,
            weights: None,
            seed: None,
            base_width: 64,
            n_res: 9,
            patch: 512,
            mode: "kin".into(),
            kernel: "constant".into(),
            kernel_size: 3,
            gaussian_sigma: None,
            policy: RemainderPolicy::PadReflect,
            threads: 1,
            order: "row-major".into(),
            order_seed: 0,
            save_tables: None,
            load_tables: None,
            full_in_budget: 1 << 30,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn kernel(&self) -> Result<KinKernel> {
        let kind = match self.kernel.as_str() {
            "constant" => KernelKind::Constant,
            "gaussian" => KernelKind::Gaussian {
                sigma: self
                    .gaussian_sigma
                    .unwrap_or(self.kernel_size as f64 / 3.0),
            },
            "global" => KernelKind::Global,
            other => return Err(usage(format!("unknown kernel `{other}`"))),
        };
        KinKernel::build(kind, self.kernel_size).map_err(|e| usage(e.to_string()))
    }

    pub fn norm_mode(&self) -> Result<NormMode> {
        parse_mode(&self.mode, || self.kernel())
    }

    pub fn exec(&self) -> Result<ExecOptions> {
        let order = match self.order.as_str() {
            "row-major" => PatchOrder::RowMajor,
            "col-major" => PatchOrder::ColumnMajor,
            "random" => PatchOrder::Shuffled(self.order_seed),
            other => return Err(usage(format!("unknown patch order `{other}`"))),
        };
        Ok(ExecOptions {
            threads: self.threads.max(1),
            order,
        })
    }

    /// Loads weights or falls back to the seeded initialization.
    pub fn generator(&self) -> Result<Generator> {
        match (&self.weights, self.seed) {
            (Some(path), _) => {
                let store = WeightStore::load(path)
                    .with_context(|| format!("loading weights {}", path.display()))?;
                let cfg = GeneratorConfig::infer_from_store(&store, self.patch)?;
                Ok(Generator::from_store(cfg, &store, false)?)
            }
            (None, Some(seed)) => {
                let cfg = GeneratorConfig {
                    base_width: self.base_width,
                    n_resblocks: self.n_res,
                    patch_size: self.patch,
                    ..GeneratorConfig::default()
                };
                cfg.validate().map_err(|e| usage(e.to_string()))?;
                Ok(Generator::from_seed(cfg, seed)?)
            }
            (None, None) => Err(usage("either --weights or --seed is required")),
        }
    }
}

pub fn parse_mode(mode: &str, kernel: impl FnOnce() -> Result<KinKernel>) -> Result<NormMode> {
    Ok(match mode {
        "full-in" => NormMode::FullIn,
        "patch-in" => NormMode::PatchIn,
        "tin" => NormMode::Tin,
        "kin" => NormMode::Kin(kernel()?),
        other => return Err(usage(format!("unknown mode `{other}`"))),
    })
}

/// `out.png` -> `out.png.<suffix>`
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
