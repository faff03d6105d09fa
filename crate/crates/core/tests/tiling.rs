//! End-to-end properties of tiled translation on small seeded generators.

use kintile_core::generator::NormHook;
use kintile_core::ops::{channel_stats, normalize_with_stats};
use kintile_core::pipeline::{cache_pass, tables_from_store, tables_to_store};
use kintile_core::{
    translate, translate_session, ExecOptions, Generator, GeneratorConfig, KinKernel, MemoryMeter,
    NormMode, PatchOrder, RemainderPolicy, Result, Tensor, TileGrid, TranslateOptions,
};
use proptest::prelude::*;

fn tiny(p: usize, seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        base_width: 4,
        n_resblocks: 2,
        patch_size: p,
        ..Default::default()
    };
    Generator::from_seed(cfg, seed).unwrap()
}

/// Colour gradient with a little deterministic texture.
fn gradient(h: usize, w: usize) -> Tensor {
    let mut d = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = x as f32 / (w - 1).max(1) as f32;
            let tex = ((x * 13 + y * 7) % 11) as f32 / 110.0;
            d[y * w + x] = 2.0 * t - 1.0 + tex;
            d[h * w + y * w + x] = 0.3 * (y as f32 / h as f32) - 0.2 + tex;
            d[2 * h * w + y * w + x] = 1.0 - 2.0 * t + tex;
        }
    }
    Tensor::from_vec([1, 3, h, w], d).unwrap()
}

fn run(gen: &Generator, img: &Tensor, mode: NormMode, exec: ExecOptions) -> Tensor {
    let mut opts = TranslateOptions::new(mode);
    opts.exec = exec;
    translate(img, gen, &opts).unwrap().0
}

#[test]
fn kin_with_unit_kernel_equals_patch_in() {
    for seed in 0..3 {
        let gen = tiny(16, seed);
        let img = gradient(64, 64);
        let a = run(&gen, &img, NormMode::PatchIn, ExecOptions::default());
        let b = run(
            &gen,
            &img,
            NormMode::Kin(KinKernel::constant(1).unwrap()),
            ExecOptions::default(),
        );
        assert!(a.max_abs_diff(&b) < 1e-5);
    }
}

/// Normalizes every site with the plain average of that site's cached table.
struct AverageHook {
    stats: Vec<(Vec<f32>, Vec<f32>)>,
}

impl NormHook for AverageHook {
    fn normalize(&self, site: usize, features: &Tensor) -> Result<Tensor> {
        let (mu, sigma) = &self.stats[site];
        let c = mu.len();
        normalize_with_stats(features, mu, sigma, &vec![1.0; c], &vec![0.0; c], 1e-5)
    }
}

#[test]
fn global_kernel_equals_average_of_patch_stats() {
    let gen = tiny(16, 7);
    let img = gradient(48, 64);
    let grid = TileGrid::new(48, 64, 16, RemainderPolicy::StrictCrop).unwrap();
    let session = gen
        .session(NormMode::Kin(KinKernel::global()), Some((grid.rows, grid.cols)))
        .unwrap();
    cache_pass(&img, &gen, &grid, &session, &ExecOptions::default()).unwrap();

    let cells = (grid.rows * grid.cols) as f64;
    let stats = session
        .layers()
        .iter()
        .map(|l| {
            let (mu, sigma) = l.table().unwrap().to_arrays(l.layer_id).unwrap();
            let c = l.channels();
            let avg = |v: &[f32]| -> Vec<f32> {
                (0..c)
                    .map(|k| (v.iter().skip(k).step_by(c).map(|&x| x as f64).sum::<f64>() / cells) as f32)
                    .collect()
            };
            (avg(&mu), avg(&sigma))
        })
        .collect();
    let hook = AverageHook { stats };

    let mut opts = TranslateOptions::new(NormMode::Kin(KinKernel::global()));
    opts.policy = RemainderPolicy::StrictCrop;
    let (out, _, _) = translate_session(&img, &gen, &opts, Some(session)).unwrap();
    for &(r, c) in &grid.coords() {
        let patch = img.crop(r * 16, c * 16, 16, 16).unwrap();
        let want = gen.forward_with(&patch, &hook).unwrap();
        let got = out.crop(r * 16, c * 16, 16, 16).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-5);
    }
}

#[test]
fn output_is_independent_of_order_and_threads() {
    let gen = tiny(16, 3);
    let img = gradient(64, 80);
    let kin = NormMode::Kin(KinKernel::gaussian(3).unwrap());
    let reference = run(&gen, &img, kin.clone(), ExecOptions::default());
    for (threads, order) in [
        (1, PatchOrder::ColumnMajor),
        (1, PatchOrder::Shuffled(11)),
        (2, PatchOrder::RowMajor),
        (8, PatchOrder::Shuffled(5)),
    ] {
        let out = run(&gen, &img, kin.clone(), ExecOptions { threads, order });
        assert_eq!(out.data(), reference.data(), "threads={threads} order={order:?}");
    }
}

#[test]
fn tables_are_identical_across_thread_counts() {
    let gen = tiny(16, 4);
    let img = gradient(64, 64);
    let grid = TileGrid::new(64, 64, 16, RemainderPolicy::StrictCrop).unwrap();
    let tables = |threads| {
        let s = gen
            .session(NormMode::Kin(KinKernel::constant(3).unwrap()), Some((4, 4)))
            .unwrap();
        let exec = ExecOptions { threads, order: PatchOrder::Shuffled(threads as u64) };
        cache_pass(&img, &gen, &grid, &s, &exec).unwrap();
        tables_to_store(&s).unwrap().to_bytes().unwrap()
    };
    assert_eq!(tables(1), tables(4));
}

#[test]
fn reloaded_tables_reproduce_output() {
    let gen = tiny(16, 9);
    let img = gradient(32, 48);
    let opts = TranslateOptions::new(NormMode::Kin(KinKernel::constant(3).unwrap()));
    let (first, _, session) = translate_session(&img, &gen, &opts, None).unwrap();
    let store = tables_to_store(&session).unwrap();

    let mut fresh = gen.session(opts.mode.clone(), Some((2, 3))).unwrap();
    tables_from_store(&mut fresh, &store).unwrap();
    let (second, _, _) = translate_session(&img, &gen, &opts, Some(fresh)).unwrap();
    assert_eq!(first.data(), second.data());
}

#[test]
fn kin_peak_memory_does_not_grow_with_image() {
    let gen = tiny(32, 1);
    let kin = NormMode::Kin(KinKernel::constant(3).unwrap());
    let peak = |n: usize| {
        let (_, report) = translate(&gradient(n, n), &gen, &TranslateOptions::new(kin.clone())).unwrap();
        report.peak_tensor_bytes
    };
    let (small, large) = (peak(64), peak(192));
    let ratio = large as f64 / small as f64;
    assert!((ratio - 1.0).abs() < 0.05, "{small} vs {large}");

    let full = |n: usize| {
        let (_, report) = translate(&gradient(n, n), &gen, &TranslateOptions::new(NormMode::FullIn)).unwrap();
        report.peak_tensor_bytes
    };
    assert!(full(128) as f64 >= 3.5 * full(64) as f64);
}

#[test]
fn meter_is_empty_after_translation() {
    let gen = tiny(16, 2);
    let img = gradient(32, 32);
    let meter = MemoryMeter::new();
    {
        let _g = meter.install();
        let out = run(&gen, &img, NormMode::Tin, ExecOptions { threads: 3, order: PatchOrder::RowMajor });
        drop(out);
    }
    assert_eq!(meter.current_bytes(), 0);
}

#[test]
fn tin_on_single_patch_matches_patch_in_when_thumbnail_equals_patch() {
    let gen = tiny(16, 5);
    let img = gradient(16, 16);
    let a = run(&gen, &img, NormMode::PatchIn, ExecOptions::default());
    let b = run(&gen, &img, NormMode::Tin, ExecOptions::default());
    assert!(a.max_abs_diff(&b) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instance_norm_yields_zero_mean_unit_std(
        c in 1usize..4, h in 2usize..12, w in 2usize..12,
        scale in 1e-3f32..50.0, offset in -20.0f32..20.0, seed in any::<u64>(),
    ) {
        let mut s = seed | 1;
        let data: Vec<f32> = (0..c * h * w)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                offset + scale * (((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0)
            })
            .collect();
        let x = Tensor::from_vec([1, c, h, w], data).unwrap();
        let st = channel_stats(&x);
        prop_assume!(st.sigma.iter().all(|&v| v > 1e-3));
        let y = normalize_with_stats(&x, &st.mu, &st.sigma, &vec![1.0; c], &vec![0.0; c], 1e-5).unwrap();
        let out = channel_stats(&y);
        for k in 0..c {
            prop_assert!(out.mu[k].abs() < 1e-5, "mean {}", out.mu[k]);
            prop_assert!((out.sigma[k] - 1.0).abs() < 1e-4, "std {}", out.sigma[k]);
        }
    }
}
