use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kintile_core::RemainderPolicy;

mod commands;
mod config;

use config::{RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "kintile", version, about = "Constant-memory tiled image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Translate one image.
    Translate(TranslateArgs),
    /// Run patch-wise IN, TIN and KIN on one image and tabulate metrics.
    Compare(CompareArgs),
    /// Write per-layer statistic similarities between patch pairs as CSV.
    AnalyzeStats(AnalyzeArgs),
    /// Measure peak tensor memory over growing synthetic images.
    BenchMem(BenchArgs),
    /// Write seeded random weights as a URW1 container.
    InitWeights(InitArgs),
    /// Write a synthetic gradient test image.
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    FullIn,
    PatchIn,
    Tin,
    Kin,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::FullIn => "full-in",
            ModeArg::PatchIn => "patch-in",
            ModeArg::Tin => "tin",
            ModeArg::Kin => "kin",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KernelArg {
    Constant,
    Gaussian,
    Global,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OrderArg {
    RowMajor,
    ColMajor,
    Random,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PolicyArg {
    StrictCrop,
    PadReflect,
}

#[derive(Args, Debug, Clone)]
struct GenArgs {
    /// URW1 weight container; architecture is read off the tensor shapes.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for random weights when no container is given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    base_width: usize,
    #[arg(long, default_value_t = 9)]
    n_res: usize,
    /// Patch side in pixels (multiple of 4).
    #[arg(long, default_value_t = 512)]
    patch: usize,
}

#[derive(Args, Debug, Clone)]
struct KernelArgs {
    #[arg(long, value_enum, default_value = "constant")]
    kernel: KernelArg,
    /// Odd kernel side length in patches.
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    /// Gaussian spread; defaults to kernel-size / 3.
    #[arg(long)]
    gaussian_sigma: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct ExecArgs {
    #[arg(long, value_enum, default_value = "pad-reflect")]
    policy: PolicyArg,
    /// Worker threads.
    #[arg(long, env = "KINTILE_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum, default_value = "row-major")]
    order: OrderArg,
    /// Seed for `--order random`.
    #[arg(long, default_value_t = 0)]
    order_seed: u64,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Replay a saved run configuration; other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    input: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    output: Option<PathBuf>,
    /// Report path; defaults to `<output>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "kin")]
    mode: ModeArg,
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    exec: ExecArgs,
    /// Write the KIN stat tables to this URW1 file.
    #[arg(long)]
    save_tables: Option<PathBuf>,
    /// Reuse KIN stat tables from a previous run and skip caching.
    #[arg(long)]
    load_tables: Option<PathBuf>,
    /// Full-image IN refuses inputs needing more activation bytes than this.
    #[arg(long, default_value_t = 1 << 30)]
    full_in_budget: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    input: PathBuf,
    /// Directory for per-mode outputs, `metrics.csv` and `compare.json`.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    /// CSV output path.
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated 1-based layer ids; all layers when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Skip pairs whose origins are farther apart than this many pixels.
    #[arg(long, default_value_t = 5000.0)]
    max_distance: f64,
    #[command(flatten)]
    gen: GenArgs,
    #[arg(long, value_enum, default_value = "strict-crop")]
    policy: PolicyArg,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Square image sides to test.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum, default_values = ["full-in", "patch-in", "tin", "kin"])]
    modes: Vec<ModeArg>,
    /// JSON report path.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Allowed relative spread of peak bytes for patch-based modes.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long, default_value_t = 1 << 30)]
    full_in_budget: u64,
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    base_width: usize,
    #[arg(long, default_value_t = 9)]
    n_res: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_config(
    subcommand: &str,
    gen: &GenArgs,
    kernel: Option<&KernelArgs>,
    exec: Option<&ExecArgs>,
) -> RunConfig {
    let mut cfg = RunConfig {
        subcommand: subcommand.into(),
        weights: gen.weights.clone(),
        seed: gen.seed,
        base_width: gen.base_width,
        n_res: gen.n_res,
        patch: gen.patch,
        ..RunConfig::default()
    };
    if let Some(k) = kernel {
        cfg.kernel = match k.kernel {
            KernelArg::Constant => "constant",
            KernelArg::Gaussian => "gaussian",
            KernelArg::Global => "global",
        }
        .into();
        cfg.kernel_size = k.kernel_size;
        cfg.gaussian_sigma = k.gaussian_sigma;
    }
    if let Some(e) = exec {
        cfg.policy = policy(e.policy);
        cfg.threads = e.threads;
        cfg.order = match e.order {
            OrderArg::RowMajor => "row-major",
            OrderArg::ColMajor => "col-major",
            OrderArg::Random => "random",
        }
        .into();
        cfg.order_seed = e.order_seed;
    }
    cfg
}

fn policy(p: PolicyArg) -> RemainderPolicy {
    match p {
        PolicyArg::StrictCrop => RemainderPolicy::StrictCrop,
        PolicyArg::PadReflect => RemainderPolicy::PadReflect,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Translate(a) => {
            let cfg = match &a.config {
                Some(path) => RunConfig::load(path)?,
                None => {
                    let mut cfg = run_config("translate", &a.gen, Some(&a.kernel), Some(&a.exec));
                    cfg.input = a.input;
                    cfg.output = a.output;
                    cfg.report = a.report;
                    cfg.mode = a.mode.name().into();
                    cfg.save_tables = a.save_tables;
                    cfg.load_tables = a.load_tables;
                    cfg.full_in_budget = a.full_in_budget;
                    cfg
                }
            };
            commands::translate_cmd(&cfg)
        }
        Command::Compare(a) => {
            let mut cfg = run_config("compare", &a.gen, Some(&a.kernel), Some(&a.exec));
            cfg.input = Some(a.input);
            cfg.output = Some(a.out_dir);
            commands::compare(&cfg)
        }
        Command::AnalyzeStats(a) => {
            let mut cfg = run_config("analyze-stats", &a.gen, None, None);
            cfg.input = Some(a.input);
            cfg.output = Some(a.output);
            cfg.policy = policy(a.policy);
            commands::analyze_stats(&cfg, a.layers, a.max_distance)
        }
        Command::BenchMem(a) => {
            let mut cfg = run_config("bench-mem", &a.gen, Some(&a.kernel), Some(&a.exec));
            cfg.output = a.output;
            cfg.full_in_budget = a.full_in_budget;
            let modes: Vec<&str> = a.modes.iter().map(|m| m.name()).collect();
            commands::bench_mem(&cfg, &a.sizes, &modes, a.tolerance)
        }
        Command::InitWeights(a) => commands::init_weights(&a.output, a.seed, a.base_width, a.n_res),
        Command::Synth(a) => commands::synth(&a.output, a.width, a.height, a.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
