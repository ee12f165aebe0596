//! End-to-end commands: simulate, fit, eval, benchmark and gradient check.
//! The CLI is a thin layer over these.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionScheme;
use crate::config::{MetricSettings, RunConfig};
use crate::error::{Error, Result};
use crate::gradient::{fd_check, random_state, Breakdown, CalibrationUse, FdReport, Problem};
use crate::metrics::{evaluate, extract_peaks, reconstruction_mse, sigma_recovery, EvalReport};
use crate::model::{predict_constrained, BiasGeometry};
use crate::objective::{LossMode, RegWeights};
use crate::optimizer::{fit_patch, fit_volume, FitConfig, OptimizerKind, VolumeFit};
use crate::phantom::{build_benchmark, random_fiber_patch, GroundTruth, PhantomSpec};
use crate::volume::SignalVolume;
use crate::volume_io::{
    read_json, read_nifti, read_param_maps, read_scheme, read_truth, write_json, write_nifti, write_param_maps,
    write_scheme, write_text, write_truth, Volume,
};

pub const DWI_FILE: &str = "dwi.nii";
pub const BVAL_FILE: &str = "dwi.bval";
pub const BVEC_FILE: &str = "dwi.bvec";
pub const TRUTH_FILE: &str = "truth.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const FIT_LOG_FILE: &str = "fit_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub n_voxels: usize,
    pub dims: [usize; 3],
    pub n_measurements: usize,
    pub angles: Vec<f64>,
    pub snr: f64,
    pub sigma_g: f64,
    pub files: Vec<PathBuf>,
}

/// Writes the benchmark dataset (`dwi.nii`, `.bval`, `.bvec`, `truth.json`).
pub fn cmd_simulate(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<SimulateSummary> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    create_dir(dir)?;
    let scheme = cfg.scheme.build()?;
    let (raw, truth) = build_benchmark(&cfg.phantom, &scheme)?;
    let files = vec![dir.join(DWI_FILE), dir.join(BVAL_FILE), dir.join(BVEC_FILE), dir.join(TRUTH_FILE)];
    write_nifti(&Volume::from_signal(&raw)?, &files[0])?;
    write_scheme(&scheme, &files[1], &files[2])?;
    write_truth(&truth, &files[3])?;
    cfg.save(dir.join(RESOLVED_CONFIG_FILE))?;
    Ok(SimulateSummary {
        n_voxels: raw.n_voxels(),
        dims: raw.dims,
        n_measurements: scheme.len(),
        angles: cfg.phantom.angles.clone(),
        snr: cfg.phantom.snr,
        sigma_g: cfg.phantom.sigma_g,
        files,
    })
}

/// Input files of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitInputs {
    pub dwi: PathBuf,
    pub bval: PathBuf,
    pub bvec: PathBuf,
    pub mask: Option<PathBuf>,
}

impl FitInputs {
    /// The files `cmd_simulate` writes into `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self { dwi: d.join(DWI_FILE), bval: d.join(BVAL_FILE), bvec: d.join(BVEC_FILE), mask: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub mode: LossMode,
    pub k: usize,
    pub iterations: usize,
    pub slabs: usize,
    pub n_voxels: usize,
    pub n_masked: usize,
    /// Sum of the final objective of every slab.
    pub final_objective: f64,
    pub reconstruction_mse: f64,
    pub sigma: f64,
    pub calibration_enabled: bool,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    stage: &'a str,
    slab: usize,
    z_start: usize,
    z_end: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds: Option<f64>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    breakdown: Option<&'a Breakdown>,
}

/// Loss trace and per-slab timing as JSON lines.
pub fn fit_log_lines(fit: &VolumeFit) -> Vec<String> {
    let mut out = Vec::new();
    let stages = fit.calibration_pass.iter().map(|r| ("calibration", 0, r)).chain(
        fit.slabs.iter().enumerate().map(|(i, r)| ("slab", i, r)),
    );
    for (stage, slab, r) in stages {
        let line = |iteration: Option<usize>, seconds: Option<f64>, breakdown: Option<&Breakdown>| {
            serde_json::to_string(&LogLine { stage, slab, z_start: r.z_start, z_end: r.z_end, iteration, seconds, breakdown })
                .expect("log line serializes")
        };
        for (t, b) in r.trace.iter().enumerate() {
            out.push(line(Some(t), None, Some(b)));
        }
        out.push(line(Some(r.trace.len()), None, Some(&r.final_breakdown)));
        out.push(line(None, Some(r.seconds), None));
    }
    out
}

/// Prediction from a volume fit, and its mean squared error against `data`.
pub fn fit_reconstruction(
    fit: &VolumeFit,
    data: &SignalVolume,
    scheme: &AcquisitionScheme,
    cfg: &FitConfig,
) -> Result<(SignalVolume, f64)> {
    let pred = predict_constrained(&fit.field, &fit.cal, scheme, &cfg.constants, data.dims, &data.mask, BiasGeometry::whole(data.dims))?;
    let mse = reconstruction_mse(&pred, data, &data.mask)?;
    Ok((pred, mse))
}

/// Fits a dataset from disk and writes parameter maps, `fit_log.jsonl`,
/// `summary.json` and `config.resolved.json` to `out_dir`.
pub fn cmd_fit(inputs: &FitInputs, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<FitSummary> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    let scheme = read_scheme(&inputs.bval, &inputs.bvec)?;
    let vol = read_nifti(&inputs.dwi)?;
    if vol.dims[3] != scheme.len() {
        return Err(Error::DataMismatch(format!(
            "{} has {} volumes but the gradient table has {} entries",
            inputs.dwi.display(),
            vol.dims[3],
            scheme.len()
        )));
    }
    let mask = match &inputs.mask {
        Some(p) => {
            let m = read_nifti(p)?;
            if m.dims[..3] != vol.dims[..3] {
                return Err(Error::DataMismatch(format!("mask dims {:?} differ from data {:?}", m.dims, vol.dims)));
            }
            Some(m.to_mask())
        }
        None => None,
    };
    let raw = vol.to_signal(mask)?;
    let data = raw.normalize_b0(&scheme)?;
    create_dir(dir)?;
    cfg.save(dir.join(RESOLVED_CONFIG_FILE))?;

    let started = Instant::now();
    let fit = fit_volume(&data, &scheme, &cfg.fit)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    let (_, mse) = fit_reconstruction(&fit, &data, &scheme, &cfg.fit)?;

    write_param_maps(&fit.field, &fit.cal, data.dims, &data.mask, dir)?;
    let log_path = dir.join(FIT_LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for line in fit_log_lines(&fit) {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }
    let summary = FitSummary {
        mode: cfg.fit.mode,
        k: cfg.fit.k,
        iterations: cfg.fit.iterations,
        slabs: fit.slabs.len(),
        n_voxels: data.n_voxels(),
        n_masked: data.n_masked(),
        final_objective: fit.slabs.iter().map(|s| s.final_breakdown.total).sum(),
        reconstruction_mse: mse,
        sigma: fit.cal.sigma(),
        calibration_enabled: cfg.fit.calibration_enabled,
        wall_seconds,
    };
    write_json(&summary, dir.join(SUMMARY_FILE))?;
    Ok(summary)
}

/// Fills in the noise-recovery fields of a report.
fn add_sigma(report: &mut EvalReport, fitted: f64, truth: f64) -> Result<()> {
    report.sigma_fit = Some(fitted);
    report.sigma_true = Some(truth);
    report.sigma_relative_error = Some(sigma_recovery(fitted, truth)?);
    Ok(())
}

/// Evaluates a fit directory against a ground-truth sidecar and writes
/// `metrics.json` and `metrics.csv` into the fit directory.
pub fn cmd_eval(fit_dir: impl AsRef<Path>, truth_path: impl AsRef<Path>, cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = fit_dir.as_ref();
    let maps = read_param_maps(dir)?;
    let truth = read_truth(truth_path)?;
    let peaks = extract_peaks(&maps.field, cfg.metrics.f_detect)?;
    let mut report = evaluate(&truth, &peaks, cfg.metrics.angle_tol, cfg.metrics.f_detect)?;
    let summary_path = dir.join(SUMMARY_FILE);
    if summary_path.exists() {
        let summary: FitSummary = read_json(&summary_path)?;
        report.reconstruction_mse = Some(summary.reconstruction_mse);
        if summary.mode == LossMode::Nll {
            add_sigma(&mut report, maps.cal.sigma(), truth.sigma)?;
        }
    }
    write_json(&report, dir.join(METRICS_JSON_FILE))?;
    write_text(dir.join(METRICS_CSV_FILE), &report.to_csv())?;
    Ok(report)
}

/// One in-memory fit of a simulated dataset, evaluated against its truth.
#[derive(Debug, Clone)]
pub struct FitRun {
    pub fit: VolumeFit,
    pub report: EvalReport,
    pub seconds: f64,
}

/// Normalizes, fits and evaluates `raw` with `fit_cfg`.
pub fn fit_and_evaluate(
    raw: &SignalVolume,
    truth: &GroundTruth,
    scheme: &AcquisitionScheme,
    fit_cfg: &FitConfig,
    metrics: &MetricSettings,
) -> Result<FitRun> {
    let data = raw.normalize_b0(scheme)?;
    let started = Instant::now();
    let fit = fit_volume(&data, scheme, fit_cfg)?;
    let seconds = started.elapsed().as_secs_f64();
    let (_, mse) = fit_reconstruction(&fit, &data, scheme, fit_cfg)?;
    let peaks = extract_peaks(&fit.field, metrics.f_detect)?;
    let mut report = evaluate(truth, &peaks, metrics.angle_tol, metrics.f_detect)?;
    report.reconstruction_mse = Some(mse);
    if fit_cfg.mode == LossMode::Nll {
        add_sigma(&mut report, fit.cal.sigma(), truth.sigma)?;
    }
    Ok(FitRun { fit, report, seconds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: LossMode,
    pub seconds: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub sigma_g: f64,
    pub error_without: f64,
    pub error_with: f64,
    pub mse_without: f64,
    pub mse_with: f64,
    pub recall_without: f64,
    pub recall_with: f64,
}

impl GainRow {
    pub fn error_reduction(&self) -> f64 {
        1.0 - self.error_with / self.error_without
    }

    pub fn mse_reduction(&self) -> f64 {
        1.0 - self.mse_with / self.mse_without
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRow {
    pub optimizer: OptimizerKind,
    /// Mean squared residual per voxel-measurement pair after the last step.
    pub final_mse: f64,
    /// First iteration whose MSE is within 110% of this optimizer's own final MSE.
    pub iterations_to_threshold: Option<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub voxels_per_angle: usize,
    pub n_voxels: usize,
    pub iterations: usize,
    pub threads: usize,
    pub modes: Vec<ModeRow>,
    pub gain_sweep: Vec<GainRow>,
    pub optimizers: Option<Vec<OptimizerRow>>,
    pub wall_seconds: f64,
}

/// Fit settings of the crossing-fiber table: repulsion only, no calibration.
pub fn table_config(cfg: &RunConfig, mode: LossMode) -> FitConfig {
    FitConfig { mode, weights: RegWeights::repulsion_only(), calibration_enabled: false, ..cfg.fit.clone() }
}

/// Both data terms on the crossing-fiber benchmark at `voxels_per_angle`.
pub fn crossing_table(cfg: &RunConfig, voxels_per_angle: usize) -> Result<Vec<ModeRow>> {
    let scheme = cfg.scheme.build()?;
    let spec = PhantomSpec { voxels_per_angle, ..cfg.phantom.clone() };
    let (raw, truth) = build_benchmark(&spec, &scheme)?;
    [LossMode::Mse, LossMode::Nll]
        .into_iter()
        .map(|mode| {
            let run = fit_and_evaluate(&raw, &truth, &scheme, &table_config(cfg, mode), &cfg.metrics)?;
            log::info!("{mode:?}: overall {:.2} deg in {:.1}s", run.report.overall.mean_error, run.seconds);
            Ok(ModeRow { mode, seconds: run.seconds, report: run.report })
        })
        .collect()
}

/// Dataset of the gain-perturbation experiment at `sigma_g`.
pub fn gain_dataset(cfg: &RunConfig, sigma_g: f64) -> Result<(AcquisitionScheme, SignalVolume, GroundTruth)> {
    let scheme = cfg.scheme.build()?;
    let b = &cfg.benchmark;
    let spec = PhantomSpec {
        angles: b.gain_angles.clone(),
        voxels_per_angle: b.gain_voxels_per_angle,
        include_single_fiber: false,
        sigma_g,
        ..cfg.phantom.clone()
    };
    let (raw, truth) = build_benchmark(&spec, &scheme)?;
    Ok((scheme, raw, truth))
}

/// Fit settings of the gain experiment: MSE, repulsion plus the configured
/// calibration penalties, calibration on or off.
pub fn gain_config(cfg: &RunConfig, calibration: bool) -> FitConfig {
    let w = cfg.fit.weights;
    let weights = RegWeights {
        lambda_alpha: w.lambda_alpha,
        lambda_beta: w.lambda_beta,
        lambda_bias_l2: w.lambda_bias_l2,
        lambda_bias_tv: w.lambda_bias_tv,
        ..RegWeights::repulsion_only()
    };
    FitConfig { mode: LossMode::Mse, weights, calibration_enabled: calibration, ..cfg.fit.clone() }
}

/// Calibration off versus on at every gain level.
pub fn gain_sweep(cfg: &RunConfig, sigmas: &[f64]) -> Result<Vec<GainRow>> {
    sigmas
        .iter()
        .map(|&sigma_g| {
            let (scheme, raw, truth) = gain_dataset(cfg, sigma_g)?;
            let off = fit_and_evaluate(&raw, &truth, &scheme, &gain_config(cfg, false), &cfg.metrics)?.report;
            let on = fit_and_evaluate(&raw, &truth, &scheme, &gain_config(cfg, true), &cfg.metrics)?.report;
            log::info!("sigma_g {sigma_g}: {:.2} -> {:.2} deg", off.overall.mean_error, on.overall.mean_error);
            Ok(GainRow {
                sigma_g,
                error_without: off.overall.mean_error,
                error_with: on.overall.mean_error,
                mse_without: off.reconstruction_mse.unwrap_or(f64::NAN),
                mse_with: on.reconstruction_mse.unwrap_or(f64::NAN),
                recall_without: off.overall.recall,
                recall_with: on.overall.recall,
            })
        })
        .collect()
}

/// Rprop against Adam on a noisy patch of 3-fiber voxels.
pub fn optimizer_comparison(cfg: &RunConfig) -> Result<Vec<OptimizerRow>> {
    let b = &cfg.benchmark;
    let scheme = cfg.scheme.build()?;
    let raw = random_fiber_patch(
        b.optimizer_voxels,
        &[0.4, 0.35, 0.25],
        cfg.phantom.eigenvalues,
        cfg.phantom.snr,
        &scheme,
        cfg.phantom.seed,
    )?;
    let data = raw.normalize_b0(&scheme)?;
    let per_pair = 1.0 / scheme.len() as f64;
    let mut rows = Vec::new();
    for optimizer in [OptimizerKind::Rprop, OptimizerKind::Adam { lr: b.adam_lr }] {
        let fit_cfg = FitConfig {
            k: 3,
            mode: LossMode::Mse,
            weights: RegWeights::repulsion_only(),
            iterations: b.optimizer_iterations,
            calibration_enabled: false,
            optimizer,
            ..cfg.fit.clone()
        };
        let started = Instant::now();
        let fit = fit_patch(&data, &scheme, &fit_cfg)?;
        let final_mse = fit.final_breakdown.data * per_pair;
        let iterations_to_threshold = fit.trace.iter().position(|t| t.data * per_pair <= 1.1 * final_mse);
        rows.push(OptimizerRow { optimizer, final_mse, iterations_to_threshold, seconds: started.elapsed().as_secs_f64() });
    }
    Ok(rows)
}

/// Options of the benchmark command beyond the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchmarkOptions {
    pub full: bool,
    pub optimizers: bool,
    /// Overrides the configured gain levels.
    pub sigma_g: Option<Vec<f64>>,
}

/// Crossing-fiber table for both data terms, the gain sweep with and
/// without calibration, and optionally the optimizer comparison. Writes
/// `benchmark.json`, `benchmark.md` and `config.resolved.json`.
pub fn cmd_benchmark(cfg: &RunConfig, opts: &BenchmarkOptions, out_dir: impl AsRef<Path>) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    create_dir(dir)?;
    cfg.save(dir.join(RESOLVED_CONFIG_FILE))?;
    let started = Instant::now();
    let vpa = if opts.full { cfg.benchmark.full_voxels_per_angle } else { cfg.benchmark.voxels_per_angle };
    let modes = crossing_table(cfg, vpa)?;
    let sigmas = opts.sigma_g.clone().unwrap_or_else(|| cfg.benchmark.gain_sigmas.clone());
    let gain_sweep = gain_sweep(cfg, &sigmas)?;
    let optimizers = if opts.optimizers { Some(optimizer_comparison(cfg)?) } else { None };
    let report = BenchmarkReport {
        voxels_per_angle: vpa,
        n_voxels: PhantomSpec { voxels_per_angle: vpa, ..cfg.phantom.clone() }.n_voxels(),
        iterations: cfg.fit.iterations,
        threads: rayon::current_num_threads(),
        modes,
        gain_sweep,
        optimizers,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&report, dir.join("benchmark.json"))?;
    write_text(dir.join("benchmark.md"), &benchmark_markdown(&report))?;
    Ok(report)
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Plain-text tables of a benchmark report.
pub fn benchmark_markdown(r: &BenchmarkReport) -> String {
    let mut s = format!(
        "# Benchmark\n\n{} voxels ({} per angle), {} iterations, {} threads, {:.0} s\n\n",
        r.n_voxels, r.voxels_per_angle, r.iterations, r.threads, r.wall_seconds
    );
    if let Some(first) = r.modes.first() {
        s.push_str("## Best-match angular error (deg)\n\n| mode |");
        for row in &first.report.rows {
            s.push_str(&match row.angle {
                Some(a) => format!(" {a} |"),
                None => " 1-fib |".into(),
            });
        }
        s.push_str(" overall | F1 | recall | sigma |\n|---|");
        s.push_str(&"---|".repeat(first.report.rows.len() + 4));
        s.push('\n');
        for m in &r.modes {
            s.push_str(&format!("| {:?} |", m.mode));
            for row in &m.report.rows {
                s.push_str(&format!(" {:.1} |", row.mean_error));
            }
            s.push_str(&format!(
                " {:.2} | {:.1} | {:.1} | {} |\n",
                m.report.overall.mean_error,
                100.0 * m.report.overall.f1,
                100.0 * m.report.overall.recall,
                fmt_opt(m.report.sigma_fit, 4)
            ));
        }
    }
    if !r.gain_sweep.is_empty() {
        s.push_str("\n## Gain perturbation (MSE mode)\n\n");
        s.push_str("| sigma_g | error off | error on | recon MSE off | recon MSE on |\n|---|---|---|---|---|\n");
        for g in &r.gain_sweep {
            s.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2e} | {:.2e} |\n",
                g.sigma_g, g.error_without, g.error_with, g.mse_without, g.mse_with
            ));
        }
    }
    if let Some(opts) = &r.optimizers {
        s.push_str("\n## Optimizers\n\n| optimizer | final MSE | iterations to 110% |\n|---|---|---|\n");
        for o in opts {
            let name = match o.optimizer {
                OptimizerKind::Rprop => "Rprop".to_string(),
                OptimizerKind::Adam { lr } => format!("Adam ({lr})"),
            };
            let it = o.iterations_to_threshold.map_or_else(|| ">max".into(), |i| i.to_string());
            s.push_str(&format!("| {name} | {:.3e} | {it} |\n", o.final_mse));
        }
    }
    s
}

/// Settings of the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckGradOptions {
    pub dims: [usize; 3],
    pub k: usize,
    /// Probes per parameter group.
    pub probes: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for CheckGradOptions {
    fn default() -> Self {
        Self { dims: [4, 3, 2], k: 2, probes: 20, step: 3e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckGradResult {
    pub mode: LossMode,
    pub report: FdReport,
}

/// Central-difference check of the analytic gradient at random parameter
/// states, in both data modes, with the configured regularizer weights and
/// calibration active.
pub fn cmd_check_grad(cfg: &RunConfig, opts: &CheckGradOptions) -> Result<Vec<CheckGradResult>> {
    cfg.validate()?;
    let scheme = cfg.scheme.build()?;
    [LossMode::Mse, LossMode::Nll]
        .into_iter()
        .enumerate()
        .map(|(i, mode)| {
            let seed = opts.seed.wrapping_add(i as u64);
            let (data, params) = random_state(opts.dims, opts.k, &scheme, seed)?;
            let problem = Problem::new(
                data,
                &scheme,
                &cfg.fit.constants,
                mode,
                cfg.fit.weights,
                CalibrationUse { intensity: true, sigma: true },
                BiasGeometry::whole(opts.dims),
            )?;
            let report = fd_check(&problem, &params, opts.step, opts.probes, seed)?;
            Ok(CheckGradResult { mode, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scheme.dirs_per_shell = 12;
        cfg.phantom.angles = vec![60.0, 90.0];
        cfg.phantom.voxels_per_angle = 4;
        cfg.fit.iterations = 30;
        cfg
    }

    #[test]
    fn simulate_fit_eval_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let sim = cmd_simulate(&cfg, dir.path().join("data")).unwrap();
        assert_eq!(sim.n_voxels, 12);
        assert_eq!(sim.n_measurements, 37);
        let fit_dir = dir.path().join("fit");
        let summary = cmd_fit(&FitInputs::in_dir(dir.path().join("data")), &cfg, &fit_dir).unwrap();
        assert_eq!(summary.slabs, 1);
        assert!(summary.reconstruction_mse.is_finite());
        let log = fs::read_to_string(fit_dir.join(FIT_LOG_FILE)).unwrap();
        assert_eq!(log.lines().filter(|l| l.contains("\"iteration\"")).count(), 31);
        let report = cmd_eval(&fit_dir, dir.path().join("data").join(TRUTH_FILE), &cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.f_detect, 0.05);
        assert_eq!(report.angle_tol, 25.0);
        assert!(fit_dir.join(METRICS_CSV_FILE).exists());
        let resolved = RunConfig::load(fit_dir.join(RESOLVED_CONFIG_FILE)).unwrap();
        assert_eq!(resolved, cfg);
    }

    #[test]
    fn fit_rejects_mismatched_scheme() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        cmd_simulate(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.scheme.dirs_per_shell = 13;
        let scheme = other.scheme.build().unwrap();
        write_scheme(&scheme, dir.path().join(BVAL_FILE), dir.path().join(BVEC_FILE)).unwrap();
        let err = cmd_fit(&FitInputs::in_dir(dir.path()), &cfg, dir.path().join("fit")).unwrap_err();
        assert!(matches!(err, Error::DataMismatch(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn simulate_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_config();
        cmd_simulate(&cfg, a.path()).unwrap();
        cmd_simulate(&cfg, b.path()).unwrap();
        for f in [DWI_FILE, BVAL_FILE, BVEC_FILE, TRUTH_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn check_grad_passes() {
        let mut cfg = RunConfig::default();
        cfg.scheme.dirs_per_shell = 8;
        let results = cmd_check_grad(&cfg, &CheckGradOptions { probes: 5, ..Default::default() }).unwrap();
        assert_eq!(results.len(), 2);
        for r in results {
            assert!(r.report.max_discrepancy() < 1e-3, "{:?}", r.report);
        }
    }
}
