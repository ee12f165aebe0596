//! Initialization, Rprop (and a reference Adam), patch fits, and slab-wise
//! whole-volume fits with overlap stitching.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionScheme;
use crate::error::{Error, Result};
use crate::gradient::{Breakdown, CalibrationUse, GradientBundle, ParamSet, Problem};
use crate::model::{inverse_softplus, BiasGeometry, CalibrationParams, ConstrainedField, ModelConstants, TissueParams};
use crate::objective::{LossMode, RegWeights};
use crate::volume::SignalVolume;

/// Rprop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpropParams {
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub delta0: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for RpropParams {
    fn default() -> Self {
        Self { eta_plus: 1.2, eta_minus: 0.5, delta0: 0.01, delta_min: 1e-8, delta_max: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
#[derive(Default)]
pub enum OptimizerKind {
    #[default]
    Rprop,
    Adam { lr: f64 },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Number of WM fiber compartments.
    pub k: usize,
    pub mode: LossMode,
    pub weights: RegWeights,
    pub constants: ModelConstants,
    pub iterations: usize,
    pub slab_size: usize,
    pub slab_overlap: usize,
    pub seed: u64,
    pub calibration_enabled: bool,
    /// Iterations of the full-volume calibration pass that precedes
    /// multi-slab fits.
    pub calibration_pass_iterations: usize,
    /// Starting noise level for the Rician data term.
    pub init_sigma: f64,
    pub optimizer: OptimizerKind,
    pub rprop: RpropParams,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 2,
            mode: LossMode::Mse,
            weights: RegWeights::default(),
            constants: ModelConstants::default(),
            iterations: 300,
            slab_size: 30,
            slab_overlap: 5,
            seed: 42,
            calibration_enabled: true,
            calibration_pass_iterations: 100,
            init_sigma: 0.05,
            optimizer: OptimizerKind::Rprop,
            rprop: RpropParams::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(0 < self.slab_overlap && self.slab_overlap < self.slab_size) {
            return Err(Error::Config(format!(
                "need 0 < slab_overlap ({}) < slab_size ({})",
                self.slab_overlap, self.slab_size
            )));
        }
        if !(self.init_sigma > 0.0) {
            return Err(Error::Config("init_sigma must be positive".into()));
        }
        let r = &self.rprop;
        if !(r.eta_plus > 1.0 && r.eta_minus > 0.0 && r.eta_minus < 1.0) {
            return Err(Error::Config("rprop needs eta_plus > 1 and 0 < eta_minus < 1".into()));
        }
        if !(0.0 < r.delta_min && r.delta_min <= r.delta0 && r.delta0 <= r.delta_max) {
            return Err(Error::Config("rprop needs 0 < delta_min <= delta0 <= delta_max".into()));
        }
        if let OptimizerKind::Adam { lr } = self.optimizer {
            if !(lr > 0.0) {
                return Err(Error::Config("adam learning rate must be positive".into()));
            }
        }
        self.weights.validate()?;
        self.constants.validate()
    }
}

/// Initial parameters for every voxel of `volume`. Each voxel draws its
/// fiber directions from its own stream keyed by `seed` and its global
/// index (`voxel_offset + local index`), so the result for a voxel does
/// not depend on how the volume is partitioned.
pub fn init_params_at(volume: &SignalVolume, config: &FitConfig, voxel_offset: usize) -> Result<ParamSet> {
    if volume.n_masked() == 0 {
        return Err(Error::EmptyMask);
    }
    let n_vox = volume.n_voxels();
    let k = config.k;
    let mut tissue = TissueParams::zeros(n_vox, k);
    tissue.s0_raw.iter_mut().for_each(|s| *s = inverse_softplus(1.0));
    for v in 0..n_vox {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream((voxel_offset + v) as u64);
        for j in 0..k {
            let d = loop {
                let d: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if n > 1e-6 {
                    break [d[0] / n, d[1] / n, d[2] / n];
                }
            };
            let o = (v * k + j) * 3;
            tissue.dir_raw[o..o + 3].copy_from_slice(&d);
        }
    }
    Ok(ParamSet { tissue, cal: CalibrationParams::identity(volume.n_meas, config.init_sigma) })
}

pub fn init_params(volume: &SignalVolume, scheme: &AcquisitionScheme, config: &FitConfig) -> Result<ParamSet> {
    if scheme.len() != volume.n_meas {
        return Err(Error::DataMismatch("volume and scheme lengths differ".into()));
    }
    init_params_at(volume, config, 0)
}

/// Per-scalar step sizes and previous gradient signs.
#[derive(Debug, Clone, PartialEq)]
pub struct RpropState {
    pub params: RpropParams,
    pub step: Vec<Vec<f64>>,
    pub prev_sign: Vec<Vec<i8>>,
}

impl RpropState {
    pub fn new(like: &ParamSet, params: RpropParams) -> Self {
        let groups = like.groups();
        Self {
            params,
            step: groups.iter().map(|g| vec![params.delta0; g.len()]).collect(),
            prev_sign: groups.iter().map(|g| vec![0; g.len()]).collect(),
        }
    }
}

#[inline]
fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// One Rprop step without weight backtracking. On a sign change the step
/// shrinks, the parameter stays put, and the stored sign is cleared.
pub fn rprop_step(params: &mut ParamSet, grads: &GradientBundle, state: &mut RpropState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let hp = state.params;
    for ((p, g), (steps, prev)) in params
        .groups_mut()
        .into_iter()
        .zip(grads.groups())
        .zip(state.step.iter_mut().zip(state.prev_sign.iter_mut()))
    {
        for i in 0..p.len() {
            let mut s = sign(g[i]);
            match s * prev[i] {
                1 => steps[i] = (steps[i] * hp.eta_plus).min(hp.delta_max),
                -1 => {
                    steps[i] = (steps[i] * hp.eta_minus).max(hp.delta_min);
                    s = 0;
                }
                _ => {}
            }
            p[i] -= s as f64 * steps[i];
            prev[i] = s;
        }
    }
    Ok(())
}

/// Adam with the usual bias correction; used as a reference optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(like: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = like.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientBundle) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (gi, (p, g)) in params.groups_mut().into_iter().zip(grads.groups()).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..p.len() {
                if g[i] == 0.0 && m[i] == 0.0 {
                    continue;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

enum Stepper {
    Rprop(RpropState),
    Adam(AdamState),
}

impl Stepper {
    fn new(kind: OptimizerKind, like: &ParamSet, rprop: RpropParams) -> Self {
        match kind {
            OptimizerKind::Rprop => Stepper::Rprop(RpropState::new(like, rprop)),
            OptimizerKind::Adam { lr } => Stepper::Adam(AdamState::new(like, lr)),
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &GradientBundle) -> Result<()> {
        match self {
            Stepper::Rprop(s) => rprop_step(params, grads, s),
            Stepper::Adam(s) => s.step(params, grads),
        }
    }
}

/// Result of optimizing one patch.
#[derive(Debug, Clone)]
pub struct PatchFit {
    pub params: ParamSet,
    /// Objective before each step; one entry per iteration.
    pub trace: Vec<Breakdown>,
    /// Objective after the last step.
    pub final_breakdown: Breakdown,
}

/// Runs `config.iterations` optimizer steps from `init`.
pub fn optimize(problem: &Problem, init: ParamSet, config: &FitConfig) -> Result<PatchFit> {
    let mut params = init;
    let mut stepper = Stepper::new(config.optimizer, &params, config.rprop);
    let mut trace = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let (breakdown, grads) = problem.gradient(&params).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { iteration },
            other => other,
        })?;
        trace.push(breakdown);
        stepper.step(&mut params, &grads).map_err(|_| Error::Divergence { iteration })?;
    }
    let final_breakdown = problem.objective(&params).map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence { iteration: config.iterations },
        other => other,
    })?;
    let initial = trace[0].total;
    if final_breakdown.total > initial {
        return Err(Error::NoProgress { initial, final_value: final_breakdown.total });
    }
    Ok(PatchFit { params, trace, final_breakdown })
}

fn calibration_use(config: &FitConfig) -> CalibrationUse {
    CalibrationUse { intensity: config.calibration_enabled, sigma: true }
}

/// Initializes and fits a single patch of b0-normalized data.
pub fn fit_patch(data: &SignalVolume, scheme: &AcquisitionScheme, config: &FitConfig) -> Result<PatchFit> {
    config.validate()?;
    scheme.ensure_fittable()?;
    let init = init_params(data, scheme, config)?;
    let problem = Problem::new(
        data.clone(),
        scheme,
        &config.constants,
        config.mode,
        config.weights,
        calibration_use(config),
        BiasGeometry::whole(data.dims),
    )?;
    optimize(&problem, init, config)
}

/// Half-open slice ranges of the slab schedule.
pub fn slab_ranges(nz: usize, size: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(nz);
        out.push((start, end));
        if end >= nz {
            break;
        }
        start = end - overlap;
    }
    out
}

/// Blend weight of slice `z` for slab `i`: linear ramps across the overlaps
/// with the neighbouring slabs, 1 elsewhere. Weights of overlapping slabs
/// sum to 1.
pub fn slab_weight(ranges: &[(usize, usize)], i: usize, z: usize) -> f64 {
    let (a, b) = ranges[i];
    if z < a || z >= b {
        return 0.0;
    }
    let mut w: f64 = 1.0;
    if i > 0 {
        let prev_end = ranges[i - 1].1;
        if z < prev_end {
            let o = (prev_end - a) as f64;
            w = w.min((z - a) as f64 / o + 0.5 / o);
        }
    }
    if i + 1 < ranges.len() {
        let next_start = ranges[i + 1].0;
        if z >= next_start {
            let o = (b - next_start) as f64;
            w = w.min((b - z) as f64 / o - 0.5 / o);
        }
    }
    w
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlabReport {
    pub z_start: usize,
    pub z_end: usize,
    pub seconds: f64,
    pub trace: Vec<Breakdown>,
    pub final_breakdown: Breakdown,
}

/// Whole-volume fit in constrained form.
#[derive(Debug, Clone)]
pub struct VolumeFit {
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
    pub field: ConstrainedField,
    pub cal: CalibrationParams,
    pub slabs: Vec<SlabReport>,
    /// Full-volume calibration pass, when one was run.
    pub calibration_pass: Option<SlabReport>,
}

/// Fits b0-normalized `volume` slab by slab and stitches the constrained
/// outputs. A volume thinner than one slab is fitted in a single pass with
/// calibration joint; otherwise calibration (when enabled) is fitted once
/// on the full volume and then held fixed while the slabs are fitted.
pub fn fit_volume(volume: &SignalVolume, scheme: &AcquisitionScheme, config: &FitConfig) -> Result<VolumeFit> {
    config.validate()?;
    scheme.ensure_fittable()?;
    if volume.n_meas != scheme.len() {
        return Err(Error::DataMismatch(format!(
            "volume has {} measurements, scheme has {}",
            volume.n_meas,
            scheme.len()
        )));
    }
    if volume.n_masked() == 0 {
        return Err(Error::EmptyMask);
    }
    let dims = volume.dims;
    let plane = dims[0] * dims[1];
    let ranges = slab_ranges(dims[2], config.slab_size, config.slab_overlap);
    let k = config.k;
    let nf = k + 3;

    let mut cal = CalibrationParams::identity(volume.n_meas, config.init_sigma);
    let mut calibration_pass = None;
    let multi = ranges.len() > 1;
    if multi && config.calibration_enabled {
        let started = Instant::now();
        let pass_config = FitConfig { iterations: config.calibration_pass_iterations.max(1), ..config.clone() };
        let init = init_params_at(volume, &pass_config, 0)?;
        let problem = Problem::new(
            volume.clone(),
            scheme,
            &config.constants,
            config.mode,
            config.weights,
            calibration_use(config),
            BiasGeometry::whole(dims),
        )?;
        let fit = optimize(&problem, init, &pass_config)?;
        cal = fit.params.cal.clone();
        calibration_pass = Some(SlabReport {
            z_start: 0,
            z_end: dims[2],
            seconds: started.elapsed().as_secs_f64(),
            trace: fit.trace,
            final_breakdown: fit.final_breakdown,
        });
    }
    let slab_cal_use = if multi {
        CalibrationUse { intensity: false, sigma: !config.calibration_enabled }
    } else {
        calibration_use(config)
    };

    let n_vox = volume.n_voxels();
    let mut field = ConstrainedField {
        k,
        s0: vec![0.0; n_vox],
        fractions: vec![0.0; n_vox * nf],
        dirs: vec![[0.0; 3]; n_vox * k],
        f_intra: vec![0.0; n_vox],
    };
    let mut dir_weight = vec![-1.0; n_vox];
    let mut slabs = Vec::with_capacity(ranges.len());
    let mut sigma_acc = (0.0, 0usize);
    let mut final_cal = cal.clone();

    for (i, &(z0, z1)) in ranges.iter().enumerate() {
        let slab = volume.slab(z0, z1);
        if slab.n_masked() == 0 {
            continue;
        }
        let started = Instant::now();
        let mut init = init_params_at(&slab, config, z0 * plane)?;
        init.cal = cal.clone();
        let problem = Problem::new(
            slab.clone(),
            scheme,
            &config.constants,
            config.mode,
            config.weights,
            slab_cal_use,
            BiasGeometry { full_dims: dims, z_offset: z0 },
        )?;
        let fit = optimize(&problem, init, config)?;
        let local = fit.params.tissue.constrain()?;
        if multi {
            if slab_cal_use.sigma {
                sigma_acc.0 += fit.params.cal.sigma_log * slab.n_masked() as f64;
                sigma_acc.1 += slab.n_masked();
            }
        } else {
            final_cal = fit.params.cal.clone();
        }
        for lv in 0..slab.n_voxels() {
            let gv = z0 * plane + lv;
            let z = gv / plane;
            let w = slab_weight(&ranges, i, z);
            field.s0[gv] += w * local.s0[lv];
            field.f_intra[gv] += w * local.f_intra[lv];
            for c in 0..nf {
                field.fractions[gv * nf + c] += w * local.fractions[lv * nf + c];
            }
            if w > dir_weight[gv] {
                dir_weight[gv] = w;
                field.dirs[gv * k..(gv + 1) * k].copy_from_slice(local.dirs(lv));
            }
        }
        slabs.push(SlabReport {
            z_start: z0,
            z_end: z1,
            seconds: started.elapsed().as_secs_f64(),
            trace: fit.trace,
            final_breakdown: fit.final_breakdown,
        });
    }
    if multi && sigma_acc.1 > 0 {
        final_cal.sigma_log = sigma_acc.0 / sigma_acc.1 as f64;
    }
    Ok(VolumeFit { dims, mask: volume.mask.clone(), field, cal: final_cal, slabs, calibration_pass })
}
