//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stdout so it shows up without `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fixelfit::config::RunConfig;
use fixelfit::metrics::EvalReport;
use fixelfit::model::{upsample_bias, CalibrationParams, ConstrainedField, BIAS_GRID_LEN};
use fixelfit::objective::{
    calibration_penalty, directional_continuity, fiber_ordering, minor_fiber_sparsity, orphan_wm, repulsion,
    spatial_huber_laplacian, BiasTv, LossMode, NeighborGraph, RegWeights,
};
use fixelfit::phantom::{build_benchmark, PhantomSpec};
use fixelfit::pipeline::{
    cmd_check_grad, fit_and_evaluate, gain_config, gain_dataset, gain_sweep, optimizer_comparison, table_config,
    CheckGradOptions,
};
use fixelfit::volume_io::{byte_swap_nifti, decode_nifti, read_nifti, write_nifti, Volume};

fn report(n: u32, pass: bool, detail: String, started: Instant) {
    let line = format!(
        "criterion {n}: {} {detail} ({:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

struct Table {
    mse: EvalReport,
    nll: EvalReport,
    /// MSE-mode reports for further initialization seeds on the same data.
    reseeded: Vec<EvalReport>,
}

/// Crossing-fiber benchmark at 50 voxels per angle, shared by several
/// criteria.
fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(|| {
        let cfg = RunConfig::default();
        let scheme = cfg.scheme.build().unwrap();
        let spec = PhantomSpec { voxels_per_angle: 50, ..cfg.phantom.clone() };
        let (raw, truth) = build_benchmark(&spec, &scheme).unwrap();
        let run = |mode, seed| {
            let fc = fixelfit::FitConfig { seed, ..table_config(&cfg, mode) };
            fit_and_evaluate(&raw, &truth, &scheme, &fc, &cfg.metrics).unwrap().report
        };
        let seed = cfg.fit.seed;
        Table {
            mse: run(LossMode::Mse, seed),
            nll: run(LossMode::Nll, seed),
            reseeded: vec![run(LossMode::Mse, seed + 1), run(LossMode::Mse, seed + 2)],
        }
    })
}

#[test]
fn criterion_01_gradient_check() {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let mut worst = 0.0_f64;
    let mut probes = 0;
    for seed in 0..2 {
        let opts = CheckGradOptions { probes: 10, seed: 10 * seed, ..Default::default() };
        for r in cmd_check_grad(&cfg, &opts).unwrap() {
            worst = worst.max(r.report.max_discrepancy());
            probes += r.report.total_probes();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-3 && probes >= 200 && secs < 60.0,
        format!("max relative discrepancy {worst:.2e} over {probes} probes, both modes, all terms"),
        t,
    );
}

#[test]
fn criterion_02_crossing_recovery_mse() {
    let t = Instant::now();
    let r = &table().mse;
    let wide = r.wide_angle_error.unwrap_or(f64::INFINITY);
    report(
        2,
        r.overall.mean_error <= 6.0 && wide <= 3.0 && r.overall.recall >= 0.88,
        format!(
            "overall {:.2} deg (<= 6), wide-angle {wide:.2} deg (<= 3), recall {:.3} (>= 0.88)",
            r.overall.mean_error, r.overall.recall
        ),
        t,
    );
}

#[test]
fn criterion_03_nll_narrow_crossings() {
    let t = Instant::now();
    let tb = table();
    let at30 = |r: &EvalReport| r.row(30.0).map_or(f64::INFINITY, |row| row.mean_error);
    let (m30, n30) = (at30(&tb.mse), at30(&tb.nll));
    let (mo, no) = (tb.mse.overall.mean_error, tb.nll.overall.mean_error);
    report(
        3,
        n30 < m30 && no <= mo,
        format!("30 deg: NLL {n30:.2} < MSE {m30:.2}; overall: NLL {no:.2} <= MSE {mo:.2}"),
        t,
    );
}

#[test]
fn criterion_04_sigma_recovery() {
    let t = Instant::now();
    let r = &table().nll;
    let rel = r.sigma_relative_error.unwrap_or(f64::INFINITY);
    report(
        4,
        rel < 0.2,
        format!("sigma {:.5} vs true {:.5}, relative error {rel:.3} (< 0.2)", r.sigma_fit.unwrap_or(f64::NAN), 1.0 / 30.0),
        t,
    );
}

#[test]
fn criterion_05_calibration_robustness() {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let row = &gain_sweep(&cfg, &[0.2]).unwrap()[0];
    let (de, dm) = (row.error_reduction(), row.mse_reduction());
    report(
        5,
        de >= 0.3 && dm >= 0.6,
        format!(
            "sigma_g 0.2: error {:.2} -> {:.2} deg (-{:.0}%, need 30%), recon MSE {:.2e} -> {:.2e} (-{:.0}%, need 60%)",
            row.error_without,
            row.error_with,
            100.0 * de,
            row.mse_without,
            row.mse_with,
            100.0 * dm
        ),
        t,
    );
}

#[test]
fn criterion_06_calibration_identity_on_clean_data() {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let (scheme, raw, truth) = gain_dataset(&cfg, 0.0).unwrap();
    let on = fit_and_evaluate(&raw, &truth, &scheme, &gain_config(&cfg, true), &cfg.metrics).unwrap();
    let off = fit_and_evaluate(&raw, &truth, &scheme, &gain_config(&cfg, false), &cfg.metrics).unwrap();
    let cal = &on.fit.cal;
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let (a, b) = (max_abs(&cal.alpha), max_abs(&cal.beta));
    let bias = upsample_bias(&cal.bias_grid, on.fit.dims);
    let (lo, hi) = bias.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let diff = (on.report.overall.mean_error - off.report.overall.mean_error).abs();
    report(
        6,
        a < 0.02 && b < 0.01 && lo >= 0.98 && hi <= 1.02 && diff < 0.3,
        format!("max|alpha| {a:.4}, max|beta| {b:.4}, bias in [{lo:.4}, {hi:.4}], error difference {diff:.3} deg"),
        t,
    );
}

#[test]
fn criterion_07_optimizer_ordering() {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let rows = optimizer_comparison(&cfg).unwrap();
    let (rp, adam) = (&rows[0], &rows[1]);
    let iters = |r: &fixelfit::pipeline::OptimizerRow| r.iterations_to_threshold.unwrap_or(usize::MAX);
    report(
        7,
        rp.final_mse <= adam.final_mse && iters(rp) < iters(adam),
        format!(
            "final MSE Rprop {:.4e} <= Adam {:.4e}; iterations to 110% of own final: Rprop {} < Adam {}",
            rp.final_mse,
            adam.final_mse,
            iters(rp),
            iters(adam)
        ),
        t,
    );
}

#[test]
fn criterion_08_seed_stability() {
    let t = Instant::now();
    let tb = table();
    let runs: Vec<&EvalReport> = std::iter::once(&tb.mse).chain(&tb.reseeded).collect();
    let spread = |f: &dyn Fn(&EvalReport) -> f64| {
        let v: Vec<f64> = runs.iter().map(|r| f(r)).collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let f1 = spread(&|r| r.overall.f1);
    let recall = spread(&|r| r.overall.recall);
    let precision = spread(&|r| r.overall.precision);
    let err = spread(&|r| r.overall.mean_error);
    report(
        8,
        f1 < 0.01 && recall < 0.01 && precision < 0.01,
        format!(
            "3 initialization seeds: spread F1 {f1:.4}, recall {recall:.4}, precision {precision:.4} (< 0.01); angular error spread {err:.3} deg"
        ),
        t,
    );
}

fn field(k: usize, wm: &[Vec<f64>], dirs: &[Vec<[f64; 3]>], s0: f64) -> ConstrainedField {
    let n = wm.len();
    let mut fractions = vec![0.0; n * (k + 3)];
    let mut all_dirs = Vec::new();
    for v in 0..n {
        fractions[v * (k + 3)] = 1.0 - wm[v].iter().sum::<f64>();
        fractions[v * (k + 3) + 2..v * (k + 3) + 2 + k].copy_from_slice(&wm[v]);
        all_dirs.extend_from_slice(&dirs[v]);
    }
    ConstrainedField { k, s0: vec![s0; n], fractions, dirs: all_dirs, f_intra: vec![0.5; n] }
}

#[test]
fn criterion_09_regularizer_neutrality() {
    let t = Instant::now();
    let w = RegWeights::default();
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    let dims = [2, 1, 1];
    let mask = vec![true; 2];
    let graph = NeighborGraph::new(dims, &mask, w.neighborhood());
    let uniform = field(2, &[vec![0.5, 0.3], vec![0.5, 0.3]], &[vec![x, y], vec![x, y]], 1.0);
    let varied = field(2, &[vec![0.5, 0.3], vec![0.2, 0.1]], &[vec![x, y], vec![x, y]], 1.0);
    let parallel = field(2, &[vec![0.5, 0.3], vec![0.5, 0.3]], &[vec![x, x], vec![x, x]], 1.0);
    let minor = field(2, &[vec![0.5, 0.1], vec![0.5, 0.1]], &[vec![x, y], vec![x, y]], 1.0);
    let unordered = field(2, &[vec![0.3, 0.5], vec![0.3, 0.5]], &[vec![x, y], vec![x, y]], 1.0);
    let antipodal = field(2, &[vec![0.5, 0.3], vec![0.5, 0.3]], &[vec![x, y], vec![[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]], 1.0);
    let turned = field(2, &[vec![0.5, 0.3], vec![0.5, 0.3]], &[vec![x, y], vec![z, y]], 1.0);
    let empty_voxels = field(2, &[vec![0.5, 0.3], vec![0.5, 0.3]], &[vec![x, y], vec![x, y]], 0.0);
    let tv = BiasTv::new([4, 4, 4]);
    let identity = CalibrationParams::identity(3, 0.05);
    let mut perturbed = identity.clone();
    perturbed.alpha[1] = 0.1;
    let mut smooth = identity.clone();
    smooth.bias_grid = vec![0.1; BIAS_GRID_LEN];
    let tv_only = RegWeights { lambda_bias_l2: 0.0, ..w };

    // (term, neutral value, violating value, neutral bound)
    let checks: Vec<(&str, f64, f64, f64)> = vec![
        (
            "spatial",
            spatial_huber_laplacian(&uniform, &mask, &graph, w.lambda_sp, w.huber_delta, None),
            spatial_huber_laplacian(&varied, &mask, &graph, w.lambda_sp, w.huber_delta, None),
            0.0,
        ),
        ("repulsion", repulsion(&uniform, &mask, w.lambda_rep, None), repulsion(&parallel, &mask, w.lambda_rep, None), 0.0),
        (
            "sparsity",
            minor_fiber_sparsity(&uniform, &mask, w.lambda_sparse, w.tau, None),
            minor_fiber_sparsity(&minor, &mask, w.lambda_sparse, w.tau, None),
            0.0,
        ),
        // The smooth gate is never exactly closed; at S0 = 1 it is below 1e-30.
        ("orphan", orphan_wm(&uniform, &mask, w.lambda_orphan, None), orphan_wm(&empty_voxels, &mask, w.lambda_orphan, None), 1e-30),
        (
            "continuity",
            directional_continuity(&uniform, &graph, w.lambda_cont, None),
            directional_continuity(&turned, &graph, w.lambda_cont, None),
            0.0,
        ),
        (
            "continuity (antipodal)",
            directional_continuity(&antipodal, &graph, w.lambda_cont, None),
            directional_continuity(&turned, &graph, w.lambda_cont, None),
            0.0,
        ),
        ("ordering", fiber_ordering(&uniform, &mask, w.lambda_order, None), fiber_ordering(&unordered, &mask, w.lambda_order, None), 0.0),
        (
            "calibration",
            calibration_penalty(&identity, Some(&tv), &w, None),
            calibration_penalty(&perturbed, Some(&tv), &w, None),
            0.0,
        ),
        (
            "bias TV (constant grid)",
            calibration_penalty(&smooth, Some(&tv), &tv_only, None),
            {
                let mut rough = identity.clone();
                rough.bias_grid[0] = 0.3;
                calibration_penalty(&rough, Some(&tv), &tv_only, None)
            },
            0.0,
        ),
    ];
    let mut failed = Vec::new();
    for (name, neutral, violating, bound) in &checks {
        let ok = *neutral >= 0.0 && *neutral <= *bound && *violating > 0.0;
        if !ok {
            failed.push(format!("{name}: neutral {neutral:e}, violating {violating:e}"));
        }
    }
    report(
        9,
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} terms vanish on their neutral configuration and are positive when violated", checks.len())
        } else {
            failed.join("; ")
        },
        t,
    );
}

#[test]
fn criterion_10_nifti_round_trip() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for i in 0..100 {
        let dims = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..6), rng.random_range(1..5)];
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff)).collect();
        let mut vol = Volume::new(dims, data).unwrap();
        vol.voxel_size = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
        if rng.random::<bool>() {
            vol.affine = Some([[vol.voxel_size[0], 0.0, 0.0, -90.0], [0.0, vol.voxel_size[1], 0.0, 126.0], [0.0, 0.0, vol.voxel_size[2], -72.0]]);
        }
        let path = dir.path().join(format!("v{i}.nii"));
        write_nifti(&vol, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        let same_bits = back.dims == vol.dims
            && back.voxel_size == vol.voxel_size
            && back.affine == vol.affine
            && back.data.iter().zip(&vol.data).all(|(a, b)| a.to_bits() == b.to_bits());
        let swapped = byte_swap_nifti(&std::fs::read(&path).unwrap()).unwrap();
        let from_swapped = decode_nifti(&swapped, Path::new("swapped")).unwrap();
        let swapped_ok = from_swapped.data.iter().zip(&vol.data).all(|(a, b)| a.to_bits() == b.to_bits())
            && from_swapped.dims == vol.dims;
        if !(same_bits && swapped_ok) {
            failures.push(i);
        }
    }
    report(
        10,
        failures.is_empty(),
        format!("100 random volumes bit-identical after write/read and after byte swap; failures {failures:?}"),
        t,
    );
}
