use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fixelfit::config::RunConfig;
use fixelfit::optimizer::OptimizerKind;
use fixelfit::pipeline::{
    benchmark_markdown, cmd_benchmark, cmd_check_grad, cmd_eval, cmd_fit, cmd_simulate, BenchmarkOptions,
    CheckGradOptions, FitInputs, BVAL_FILE, BVEC_FILE, DWI_FILE,
};
use fixelfit::{Error, LossMode, Result};

#[derive(Parser)]
#[command(name = "fixelfit", version, about = "Multi-compartment diffusion MRI fixel fitting")]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. 1 gives bitwise-reproducible output.
    #[arg(long, global = true, env = "FIXELFIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic crossing-fiber dataset.
    Simulate(SimulateArgs),
    /// Fit a dataset and write parameter maps.
    Fit(FitArgs),
    /// Score a fit against ground truth.
    Eval(EvalArgs),
    /// Crossing-fiber table, gain sweep and optional optimizer comparison.
    Benchmark(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    CheckGrad(CheckGradArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma_g: Option<f64>,
    #[arg(long)]
    voxels_per_angle: Option<usize>,
    /// Comma-separated crossing angles in degrees.
    #[arg(long, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    #[arg(long)]
    no_single_fiber: bool,
}

#[derive(Args, Default)]
struct FitOverrides {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<LossMode>,
    #[arg(long)]
    no_calibration: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Seed of the parameter initialization.
    #[arg(long)]
    fit_seed: Option<u64>,
    #[arg(long)]
    slab_size: Option<usize>,
    #[arg(long)]
    slab_overlap: Option<usize>,
    /// Use Adam with this learning rate instead of Rprop.
    #[arg(long)]
    adam: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    /// Directory holding dwi.nii, dwi.bval and dwi.bvec.
    #[arg(long, conflicts_with_all = ["dwi", "bval", "bvec"])]
    data: Option<PathBuf>,
    #[arg(long, requires_all = ["bval", "bvec"])]
    dwi: Option<PathBuf>,
    #[arg(long)]
    bval: Option<PathBuf>,
    #[arg(long)]
    bvec: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitOverrides,
}

#[derive(Args, Default)]
struct MetricOverrides {
    #[arg(long)]
    f_detect: Option<f64>,
    #[arg(long)]
    angle_tol: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of `fit`.
    fit_dir: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[command(flatten)]
    metrics: MetricOverrides,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(short, long)]
    out: PathBuf,
    /// 200 voxels per angle instead of the reduced default.
    #[arg(long)]
    full: bool,
    /// Add the Rprop versus Adam comparison.
    #[arg(long)]
    optimizers: bool,
    /// Comma-separated gain levels for the calibration sweep.
    #[arg(long, value_delimiter = ',')]
    sigma_g: Option<Vec<f64>>,
    #[arg(long)]
    voxels_per_angle: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    fit: FitOverrides,
    #[command(flatten)]
    metrics: MetricOverrides,
}

#[derive(Args)]
struct CheckGradArgs {
    /// Probes per parameter group.
    #[arg(long, default_value_t = 25)]
    probes: usize,
    #[arg(long, default_value_t = 3e-4)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Maximum allowed relative discrepancy.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

fn parse_mode(s: &str) -> std::result::Result<LossMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "mse" => Ok(LossMode::Mse),
        "nll" => Ok(LossMode::Nll),
        other => Err(format!("unknown mode '{other}', expected mse or nll")),
    }
}

impl FitOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let f = &mut cfg.fit;
        if let Some(m) = self.mode {
            f.mode = m;
        }
        if self.no_calibration {
            f.calibration_enabled = false;
        }
        if let Some(v) = self.iterations {
            f.iterations = v;
        }
        if let Some(v) = self.k {
            f.k = v;
        }
        if let Some(v) = self.fit_seed {
            f.seed = v;
        }
        if let Some(v) = self.slab_size {
            f.slab_size = v;
        }
        if let Some(v) = self.slab_overlap {
            f.slab_overlap = v;
        }
        if let Some(lr) = self.adam {
            f.optimizer = OptimizerKind::Adam { lr };
        }
    }
}

impl MetricOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.f_detect {
            cfg.metrics.f_detect = v;
        }
        if let Some(v) = self.angle_tol {
            cfg.metrics.angle_tol = v;
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::Simulate(a) => {
            let p = &mut cfg.phantom;
            if let Some(v) = a.snr {
                p.snr = v;
            }
            if let Some(v) = a.seed {
                p.seed = v;
            }
            if let Some(v) = a.sigma_g {
                p.sigma_g = v;
            }
            if let Some(v) = a.voxels_per_angle {
                p.voxels_per_angle = v;
            }
            if let Some(v) = &a.angles {
                p.angles = v.clone();
            }
            if a.no_single_fiber {
                p.include_single_fiber = false;
            }
        }
        Command::Fit(a) => a.fit.apply(&mut cfg),
        Command::Eval(a) => a.metrics.apply(&mut cfg),
        Command::Benchmark(a) => {
            a.fit.apply(&mut cfg);
            a.metrics.apply(&mut cfg);
            if let Some(v) = a.voxels_per_angle {
                cfg.benchmark.voxels_per_angle = v;
                cfg.benchmark.full_voxels_per_angle = v;
            }
            if let Some(v) = a.snr {
                cfg.phantom.snr = v;
            }
            if let Some(v) = a.seed {
                cfg.phantom.seed = v;
            }
        }
        Command::CheckGrad(_) => {}
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::Simulate(a) => {
            let s = cmd_simulate(&cfg, &a.out)?;
            println!(
                "{} voxels {:?}, {} measurements, SNR {}, sigma_g {}, angles {:?}",
                s.n_voxels, s.dims, s.n_measurements, s.snr, s.sigma_g, s.angles
            );
            for f in &s.files {
                println!("  {}", f.display());
            }
        }
        Command::Fit(a) => {
            let inputs = match (&a.data, &a.dwi) {
                (Some(d), _) => FitInputs { mask: a.mask.clone(), ..FitInputs::in_dir(d) },
                (None, Some(dwi)) => FitInputs {
                    dwi: dwi.clone(),
                    bval: a.bval.clone().expect("required by clap"),
                    bvec: a.bvec.clone().expect("required by clap"),
                    mask: a.mask.clone(),
                },
                (None, None) => {
                    return Err(Error::Config(format!(
                        "give --data DIR (with {DWI_FILE}, {BVAL_FILE}, {BVEC_FILE}) or --dwi/--bval/--bvec"
                    )))
                }
            };
            print_json(&cmd_fit(&inputs, &cfg, &a.out)?);
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a.fit_dir, &a.truth, &cfg)?;
            print!("{}", report.to_csv());
        }
        Command::Benchmark(a) => {
            let opts = BenchmarkOptions { full: a.full, optimizers: a.optimizers, sigma_g: a.sigma_g.clone() };
            let report = cmd_benchmark(&cfg, &opts, &a.out)?;
            print!("{}", benchmark_markdown(&report));
        }
        Command::CheckGrad(a) => {
            let opts = CheckGradOptions { k: a.k, probes: a.probes, step: a.step, seed: a.seed, ..Default::default() };
            let results = cmd_check_grad(&cfg, &opts)?;
            let mut worst = 0.0_f64;
            for r in &results {
                for g in &r.report.groups {
                    println!("{:?} {:<16} probes {:>3}  max rel {:.3e}", r.mode, g.group, g.probes, g.max_discrepancy);
                }
                worst = worst.max(r.report.max_discrepancy());
            }
            let probes: usize = results.iter().map(|r| r.report.total_probes()).sum();
            println!("{probes} probes, max relative discrepancy {worst:.3e}");
            if worst.is_nan() || worst >= a.tol {
                return Err(Error::GradientCheck { max: worst, tol: a.tol });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
