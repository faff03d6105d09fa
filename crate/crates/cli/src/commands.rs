use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kintile_core::metrics::{
    histogram_correlation, seam_discrepancy, sobel_gradient_ycbcr, ssim, stats_similarity,
    SimilarityOptions,
};
use kintile_core::pipeline::{tables_from_store, tables_to_store};
use kintile_core::{
    synthetic_gradient, translate, translate_session, Generator, KinError, NormMode, Rgb8Image,
    Tensor, TileGrid, TranslateOptions, TranslationReport, WeightStore,
};
use serde::{Deserialize, Serialize};

use crate::config::{parse_mode, sibling, usage, RunConfig};

fn limit_threads(threads: usize) {
    // a second call in the same process fails harmlessly
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global();
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| usage(format!("{flag} is required")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn load_image(path: &Path) -> Result<Rgb8Image> {
    Rgb8Image::load(path).with_context(|| format!("reading {}", path.display()))
}

fn options(cfg: &RunConfig, mode: NormMode) -> Result<TranslateOptions> {
    Ok(TranslateOptions {
        mode,
        policy: cfg.policy,
        exec: cfg.exec()?,
        full_in_budget_bytes: cfg.full_in_budget,
    })
}

pub fn translate_cmd(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "--input")?;
    let output = required(&cfg.output, "--output")?;
    let mode = cfg.norm_mode()?;
    if (cfg.load_tables.is_some() || cfg.save_tables.is_some()) && !matches!(mode, NormMode::Kin(_)) {
        return Err(usage("--save-tables and --load-tables need --mode kin"));
    }
    let opts = options(cfg, mode.clone())?;
    let gen = cfg.generator()?;
    limit_threads(cfg.threads);

    let image = load_image(input)?.to_tensor();
    let session = match &cfg.load_tables {
        Some(path) => {
            let grid = TileGrid::new(image.height(), image.width(), gen.patch_size(), cfg.policy)?;
            let mut session = gen.session(mode, Some((grid.rows, grid.cols)))?;
            let store = WeightStore::load(path)
                .with_context(|| format!("loading tables {}", path.display()))?;
            tables_from_store(&mut session, &store)?;
            Some(session)
        }
        None => None,
    };
    let (out, mut report, session) = translate_session(&image, &gen, &opts, session)?;
    drop(image);

    Rgb8Image::from_tensor(&out)?
        .save(output)
        .with_context(|| format!("writing {}", output.display()))?;
    report.output_path = Some(output.display().to_string());
    let report_path = cfg
        .report
        .clone()
        .unwrap_or_else(|| sibling(output, "report.json"));
    write_json(&report_path, &report)?;
    cfg.save(&sibling(output, "config.json"))?;
    if let Some(path) = &cfg.save_tables {
        tables_to_store(&session)?
            .save(path)
            .with_context(|| format!("writing tables {}", path.display()))?;
    }
    print_report(&report);
    Ok(())
}

fn print_report(r: &TranslationReport) {
    println!(
        "{} {}x{} -> {}x{} ({}x{} patches of {}), peak {} B, tables {} B, caching {:.1} ms, inference {:.1} ms",
        r.kernel.as_deref().map_or(r.mode.clone(), |k| format!("{} {k}", r.mode)),
        r.image_w,
        r.image_h,
        r.output_w,
        r.output_h,
        r.rows,
        r.cols,
        r.patch_size,
        r.peak_tensor_bytes,
        r.table_bytes,
        r.caching_ms,
        r.inference_ms,
    );
}

/// One row of `metrics.csv` written by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: String,
    pub kernel: String,
    pub seam: f64,
    pub hist_corr: f64,
    pub sobel_grad: f64,
    pub ssim_vs_input: f64,
    pub peak_tensor_bytes: u64,
    pub caching_ms: f64,
    pub inference_ms: f64,
}

#[derive(Debug, Serialize)]
struct CompareReport<'a> {
    config: &'a RunConfig,
    rows: &'a [CompareRow],
}

pub fn compare(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "--input")?;
    let out_dir = required(&cfg.output, "--out-dir")?;
    let kin = NormMode::Kin(cfg.kernel()?);
    let gen = cfg.generator()?;
    limit_threads(cfg.threads);
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let source = load_image(input)?;
    let image = source.to_tensor();
    let grid = TileGrid::new(image.height(), image.width(), gen.patch_size(), cfg.policy)?;
    let (oh, ow) = grid.output_dims();
    let reference = Rgb8Image::from_tensor(&kintile_core::pipeline::extract_region(&image, 0, 0, oh, ow))?;

    let mut rows = Vec::new();
    for mode in [NormMode::PatchIn, NormMode::Tin, kin] {
        let (out, report) = translate(&image, &gen, &options(cfg, mode.clone())?)?;
        let rgb = Rgb8Image::from_tensor(&out)?;
        rgb.save(out_dir.join(format!("{}.png", mode.name())))?;
        rows.push(CompareRow {
            mode: mode.name().into(),
            kernel: report.kernel.unwrap_or_default(),
            seam: seam_discrepancy(&out, &grid)?,
            hist_corr: histogram_correlation(&reference, &rgb).value,
            sobel_grad: sobel_gradient_ycbcr(&rgb),
            ssim_vs_input: ssim(&reference, &rgb)?,
            peak_tensor_bytes: report.peak_tensor_bytes,
            caching_ms: report.caching_ms,
            inference_ms: report.inference_ms,
        });
    }

    let mut csv = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
    for row in &rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    write_json(
        &out_dir.join("compare.json"),
        &CompareReport {
            config: cfg,
            rows: &rows,
        },
    )?;
    println!(
        "{:<9} {:<12} {:>10} {:>10} {:>10} {:>8}",
        "mode", "kernel", "seam", "hist_corr", "sobel", "ssim"
    );
    for r in &rows {
        println!(
            "{:<9} {:<12} {:>10.5} {:>10.5} {:>10.3} {:>8.4}",
            r.mode, r.kernel, r.seam, r.hist_corr, r.sobel_grad, r.ssim_vs_input
        );
    }
    Ok(())
}

pub fn analyze_stats(cfg: &RunConfig, layers: Option<Vec<usize>>, max_distance: f64) -> Result<()> {
    let input = required(&cfg.input, "--input")?;
    let output = required(&cfg.output, "--output")?;
    let gen = cfg.generator()?;
    if let Some(bad) = layers
        .iter()
        .flatten()
        .find(|&&l| l == 0 || l > gen.config().norm_site_count())
    {
        return Err(usage(format!(
            "layer {bad} out of range 1..={}",
            gen.config().norm_site_count()
        )));
    }
    let image = load_image(input)?.to_tensor();
    let grid = TileGrid::new(image.height(), image.width(), gen.patch_size(), cfg.policy)?;
    let opts = SimilarityOptions {
        layers,
        max_distance_px: max_distance,
        include_self_pairs: true,
    };
    let records = stats_similarity(&gen, &image, &grid, &opts)?;
    let mut csv = csv::Writer::from_path(output)
        .with_context(|| format!("writing {}", output.display()))?;
    for r in &records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    cfg.save(&sibling(output, "config.json"))?;
    println!(
        "{} records over {} patches written to {}",
        records.len(),
        grid.len(),
        output.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub mode: String,
    pub size: usize,
    pub rows: usize,
    pub cols: usize,
    pub peak_tensor_bytes: Option<u64>,
    pub table_bytes: Option<u64>,
    pub elapsed_ms: Option<f64>,
    /// Why the run was refused, e.g. the full-image memory budget.
    pub refused: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flatness {
    pub mode: String,
    pub min_peak: u64,
    pub max_peak: u64,
    pub spread: f64,
    pub flat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: RunConfig,
    pub tolerance: f64,
    pub entries: Vec<BenchEntry>,
    pub flatness: Vec<Flatness>,
}

pub fn flatness(entries: &[BenchEntry], mode: &str, tolerance: f64) -> Option<Flatness> {
    let peaks: Vec<u64> = entries
        .iter()
        .filter(|e| e.mode == mode)
        .filter_map(|e| e.peak_tensor_bytes)
        .collect();
    let (min, max) = (*peaks.iter().min()?, *peaks.iter().max()?);
    let spread = (max - min) as f64 / min.max(1) as f64;
    Some(Flatness {
        mode: mode.into(),
        min_peak: min,
        max_peak: max,
        spread,
        flat: spread < tolerance,
    })
}

pub fn bench_mem(cfg: &RunConfig, sizes: &[usize], modes: &[&str], tolerance: f64) -> Result<()> {
    let gen = cfg.generator()?;
    let modes: Vec<NormMode> = modes
        .iter()
        .map(|m| parse_mode(m, || cfg.kernel()))
        .collect::<Result<_>>()?;
    limit_threads(cfg.threads);
    let mut entries = Vec::new();
    for &size in sizes {
        let image = synthetic_gradient(size, size, cfg.seed.unwrap_or(0)).to_tensor();
        for mode in &modes {
            entries.push(bench_one(cfg, &gen, &image, mode)?);
        }
    }
    let flatness: Vec<Flatness> = modes
        .iter()
        .filter(|m| !matches!(m, NormMode::FullIn))
        .filter_map(|m| flatness(&entries, m.name(), tolerance))
        .collect();
    let report = BenchReport {
        config: cfg.clone(),
        tolerance,
        entries,
        flatness,
    };
    if let Some(path) = &cfg.output {
        write_json(path, &report)?;
    }
    println!("{:<9} {:>6} {:>8} {:>14} {:>12}", "mode", "size", "grid", "peak_bytes", "ms");
    for e in &report.entries {
        let peak = e.peak_tensor_bytes.map_or("refused".to_owned(), |p| p.to_string());
        let ms = e.elapsed_ms.map_or("-".to_owned(), |m| format!("{m:.1}"));
        println!(
            "{:<9} {:>6} {:>8} {:>14} {:>12}",
            e.mode,
            e.size,
            format!("{}x{}", e.rows, e.cols),
            peak,
            ms
        );
    }
    let bumpy: Vec<&Flatness> = report.flatness.iter().filter(|f| !f.flat).collect();
    if !bumpy.is_empty() {
        anyhow::bail!(
            "peak memory not flat for: {}",
            bumpy
                .iter()
                .map(|f| format!("{} (spread {:.3})", f.mode, f.spread))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    Ok(())
}

fn bench_one(cfg: &RunConfig, gen: &Generator, image: &Tensor, mode: &NormMode) -> Result<BenchEntry> {
    let grid = TileGrid::new(image.height(), image.width(), gen.patch_size(), cfg.policy)?;
    let mut entry = BenchEntry {
        mode: mode.name().into(),
        size: image.height(),
        rows: grid.rows,
        cols: grid.cols,
        peak_tensor_bytes: None,
        table_bytes: None,
        elapsed_ms: None,
        refused: None,
    };
    match translate(image, gen, &options(cfg, mode.clone())?) {
        Ok((_, r)) => {
            entry.peak_tensor_bytes = Some(r.peak_tensor_bytes);
            entry.table_bytes = Some(r.table_bytes);
            entry.elapsed_ms = Some(r.caching_ms + r.inference_ms);
        }
        Err(e @ KinError::OverBudget { .. }) => entry.refused = Some(e.to_string()),
        Err(e) => return Err(e.into()),
    }
    Ok(entry)
}

pub fn init_weights(output: &Path, seed: u64, base_width: usize, n_res: usize) -> Result<()> {
    let cfg = RunConfig {
        seed: Some(seed),
        base_width,
        n_res,
        patch: 8,
        ..RunConfig::default()
    };
    cfg.generator()?
        .to_store()
        .save(output)
        .with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

pub fn synth(output: &Path, width: usize, height: usize, seed: u64) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(usage("--width and --height must be positive"));
    }
    synthetic_gradient(width, height, seed)
        .save(output)
        .with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}
