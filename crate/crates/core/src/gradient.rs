//! Objective evaluation with exact closed-form gradients over a patch, and a
//! central finite-difference harness that checks them.
//!
//! The data term is separable per measurement, so the forward pass and the
//! adjoint for each measurement are fused in a single sweep. Voxels are
//! processed in fixed-size chunks and the chunk partials are reduced in
//! chunk order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionScheme;
use crate::error::{Error, Result};
use crate::model::{
    dot3, BiasGeometry, BiasStencil, CalibrationParams, ConstrainedField, ConstrainedVoxel,
    ModelConstants, SchemeCache, TissueParams, DIR_NORM_FLOOR,
};
use crate::objective::{
    calibration_penalty, directional_continuity, fiber_ordering, minor_fiber_sparsity, orphan_wm,
    repulsion, rician_term, spatial_huber_laplacian, BiasTv, ConstrainedGrad, LossMode,
    NeighborGraph, RegWeights,
};
use crate::volume::SignalVolume;

const CHUNK: usize = 128;

/// Joint tissue and calibration parameters. The same layout carries
/// gradients ([`GradientBundle`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tissue: TissueParams,
    pub cal: CalibrationParams,
}

/// Derivatives of the objective, shaped exactly like [`ParamSet`].
pub type GradientBundle = ParamSet;

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            tissue: TissueParams::zeros(self.tissue.n_voxels(), self.tissue.k),
            cal: self.cal.zeros_like(),
        }
    }

    /// Parameter groups in a fixed order: s0, fraction logits, directions,
    /// f_intra, bias grid, alpha, beta, sigma_log.
    pub fn groups(&self) -> [&[f64]; 8] {
        [
            &self.tissue.s0_raw,
            &self.tissue.fraction_logits,
            &self.tissue.dir_raw,
            &self.tissue.f_intra_raw,
            &self.cal.bias_grid,
            &self.cal.alpha,
            &self.cal.beta,
            std::slice::from_ref(&self.cal.sigma_log),
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.tissue.s0_raw,
            &mut self.tissue.fraction_logits,
            &mut self.tissue.dir_raw,
            &mut self.tissue.f_intra_raw,
            &mut self.cal.bias_grid,
            &mut self.cal.alpha,
            &mut self.cal.beta,
            std::slice::from_mut(&mut self.cal.sigma_log),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub const GROUP_NAMES: [&str; 8] =
    ["s0_raw", "fraction_logits", "dir_raw", "f_intra_raw", "bias_grid", "alpha", "beta", "sigma_log"];

/// Per-term objective values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub data: f64,
    pub spatial: f64,
    pub repulsion: f64,
    pub sparsity: f64,
    pub orphan: f64,
    pub continuity: f64,
    pub ordering: f64,
    pub calibration: f64,
    pub total: f64,
}

impl Breakdown {
    pub fn terms(&self) -> [f64; 8] {
        [
            self.data,
            self.spatial,
            self.repulsion,
            self.sparsity,
            self.orphan,
            self.continuity,
            self.ordering,
            self.calibration,
        ]
    }
}

/// Which calibration parameters take part in the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationUse {
    /// Bias grid, alpha and beta are free (and penalized).
    pub intensity: bool,
    /// `sigma_log` is free; only meaningful for the Rician data term.
    pub sigma: bool,
}

/// A fitting problem over one patch of voxels.
#[derive(Debug, Clone)]
pub struct Problem {
    /// b0-normalized measurements with the patch mask.
    pub data: SignalVolume,
    pub cache: SchemeCache,
    pub mode: LossMode,
    pub weights: RegWeights,
    pub calibration: CalibrationUse,
    graph: NeighborGraph,
    stencils: Vec<BiasStencil>,
    tv: Option<BiasTv>,
    masked: Vec<usize>,
    /// Measurements whose alpha and beta stay at identity: the b0 volumes
    /// the data was normalized by.
    pinned: Vec<bool>,
}

impl Problem {
    pub fn new(
        data: SignalVolume,
        scheme: &AcquisitionScheme,
        consts: &ModelConstants,
        mode: LossMode,
        weights: RegWeights,
        calibration: CalibrationUse,
        geometry: BiasGeometry,
    ) -> Result<Self> {
        if data.n_meas != scheme.len() {
            return Err(Error::DataMismatch(format!(
                "data has {} measurements, scheme has {}",
                data.n_meas,
                scheme.len()
            )));
        }
        weights.validate()?;
        consts.validate()?;
        let masked: Vec<usize> = (0..data.n_voxels()).filter(|&v| data.mask[v]).collect();
        if masked.is_empty() {
            return Err(Error::EmptyMask);
        }
        let graph = NeighborGraph::new(data.dims, &data.mask, weights.neighborhood());
        let stencils = geometry.stencils(data.dims);
        let tv = (calibration.intensity && weights.lambda_bias_tv > 0.0).then(|| BiasTv::new(geometry.full_dims));
        Ok(Self {
            cache: SchemeCache::new(scheme, consts),
            data,
            mode,
            weights,
            calibration,
            graph,
            stencils,
            tv,
            masked,
            pinned: scheme.b0_mask().to_vec(),
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.data.n_voxels()
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Per measurement: true when its alpha and beta are held at zero.
    pub fn pinned(&self) -> &[bool] {
        &self.pinned
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        if params.tissue.n_voxels() != self.n_voxels() {
            return Err(Error::DataMismatch(format!(
                "parameters for {} voxels, patch has {}",
                params.tissue.n_voxels(),
                self.n_voxels()
            )));
        }
        if params.cal.alpha.len() != self.data.n_meas || params.cal.beta.len() != self.data.n_meas {
            return Err(Error::DataMismatch("calibration length differs from the scheme".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(())
    }

    /// Objective value and per-term breakdown.
    pub fn objective(&self, params: &ParamSet) -> Result<Breakdown> {
        self.evaluate(params, false).map(|(b, _)| b)
    }

    /// Objective value, breakdown, and the gradient with respect to every raw
    /// parameter. Masked-out voxels and frozen calibration parameters get
    /// zero gradient.
    pub fn gradient(&self, params: &ParamSet) -> Result<(Breakdown, GradientBundle)> {
        self.evaluate(params, true).map(|(b, g)| (b, g.expect("gradient requested")))
    }

    /// Predicted (calibrated) signal for the patch.
    pub fn predict(&self, params: &ParamSet) -> Result<SignalVolume> {
        self.check(params)?;
        let mut out = SignalVolume::zeros(self.data.dims, self.data.n_meas);
        out.mask = self.data.mask.clone();
        let mut buf = vec![0.0; self.data.n_meas];
        for &v in &self.masked {
            let cv = params.tissue.constrain_voxel(v);
            crate::model::tissue_signal(&cv, &self.cache, &mut buf);
            let bias = self.stencils[v].log_bias(&params.cal.bias_grid).exp();
            crate::model::apply_calibration(&mut buf, &params.cal, bias);
            out.voxel_mut(v).copy_from_slice(&buf);
        }
        Ok(out)
    }

    fn evaluate(&self, params: &ParamSet, want_grad: bool) -> Result<(Breakdown, Option<GradientBundle>)> {
        self.check(params)?;
        let k = params.tissue.k;
        let n_meas = self.data.n_meas;
        let n_vox = self.n_voxels();
        let field = params.tissue.constrain()?;
        let sigma = params.cal.sigma();
        // MSE: squared residuals summed over measurements, averaged over voxels.
        // NLL: summed over every voxel-measurement pair.
        let norm = match self.mode {
            LossMode::Mse => 1.0 / self.masked.len() as f64,
            LossMode::Nll => 1.0,
        };
        let scales: Vec<f64> = params.cal.alpha.iter().map(|a| a.exp()).collect();

        let chunks: Vec<ChunkOut> = self
            .masked
            .par_chunks(CHUNK)
            .map(|voxels| {
                let mut out = ChunkOut::new(n_meas, want_grad);
                for &v in voxels {
                    let cv = params.tissue.constrain_voxel(v);
                    let log_b = self.stencils[v].log_bias(&params.cal.bias_grid);
                    let ctx = VoxelCtx {
                        y: self.data.voxel(v),
                        cache: &self.cache,
                        scales: &scales,
                        beta: &params.cal.beta,
                        bias: log_b.exp(),
                        mode: self.mode,
                        sigma,
                        norm,
                    };
                    let vg = data_term_voxel(&cv, &ctx, &mut out, want_grad);
                    if let Some(vg) = vg {
                        out.voxels.push((v, vg));
                    }
                }
                out
            })
            .collect();

        let mut breakdown = Breakdown::default();
        let mut cgrad = want_grad.then(|| ConstrainedGrad::zeros(n_vox, k));
        let mut grad = want_grad.then(|| params.zeros_like());
        for chunk in &chunks {
            breakdown.data += chunk.value;
            if let (Some(g), Some(cg)) = (grad.as_mut(), cgrad.as_mut()) {
                for (ga, a) in g.cal.alpha.iter_mut().zip(&chunk.g_alpha) {
                    *ga += a;
                }
                for (gb, b) in g.cal.beta.iter_mut().zip(&chunk.g_beta) {
                    *gb += b;
                }
                g.cal.sigma_log += chunk.g_sigma_log;
                for (v, vg) in &chunk.voxels {
                    let st = &self.stencils[*v];
                    for (&i, &w) in st.index.iter().zip(&st.weight) {
                        g.cal.bias_grid[i] += w * vg.log_bias;
                    }
                    cg.s0[*v] = vg.s0;
                    cg.fractions[v * (k + 3)..(v + 1) * (k + 3)].copy_from_slice(&vg.fractions);
                    cg.dirs[v * k..(v + 1) * k].copy_from_slice(&vg.dirs);
                    cg.f_intra[*v] = vg.f_intra;
                }
            }
        }

        let w = &self.weights;
        let mask = &self.data.mask;
        breakdown.spatial = spatial_huber_laplacian(&field, mask, &self.graph, w.lambda_sp, w.huber_delta, cgrad.as_mut());
        breakdown.repulsion = repulsion(&field, mask, w.lambda_rep, cgrad.as_mut());
        breakdown.sparsity = minor_fiber_sparsity(&field, mask, w.lambda_sparse, w.tau, cgrad.as_mut());
        breakdown.orphan = orphan_wm(&field, mask, w.lambda_orphan, cgrad.as_mut());
        breakdown.continuity = directional_continuity(&field, &self.graph, w.lambda_cont, cgrad.as_mut());
        breakdown.ordering = fiber_ordering(&field, mask, w.lambda_order, cgrad.as_mut());
        if self.calibration.intensity {
            breakdown.calibration =
                calibration_penalty(&params.cal, self.tv.as_ref(), w, grad.as_mut().map(|g| &mut g.cal));
        }
        breakdown.total = breakdown.terms().iter().sum();
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("objective"));
        }

        if let (Some(g), Some(cg)) = (grad.as_mut(), cgrad.as_ref()) {
            backprop_constraints(&params.tissue, &field, cg, &self.masked, &mut g.tissue);
            if !self.calibration.intensity {
                g.cal.bias_grid.iter_mut().for_each(|v| *v = 0.0);
                g.cal.alpha.iter_mut().for_each(|v| *v = 0.0);
                g.cal.beta.iter_mut().for_each(|v| *v = 0.0);
            }
            for (n, _) in self.pinned.iter().enumerate().filter(|(_, &p)| p) {
                g.cal.alpha[n] = 0.0;
                g.cal.beta[n] = 0.0;
            }
            if !(self.calibration.sigma && self.mode == LossMode::Nll) {
                g.cal.sigma_log = 0.0;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
        }
        Ok((breakdown, grad))
    }
}

struct ChunkOut {
    value: f64,
    g_alpha: Vec<f64>,
    g_beta: Vec<f64>,
    g_sigma_log: f64,
    voxels: Vec<(usize, VoxelGrad)>,
}

impl ChunkOut {
    fn new(n_meas: usize, want_grad: bool) -> Self {
        let len = if want_grad { n_meas } else { 0 };
        Self { value: 0.0, g_alpha: vec![0.0; len], g_beta: vec![0.0; len], g_sigma_log: 0.0, voxels: Vec::new() }
    }
}

/// Data-term derivatives of one voxel with respect to its constrained view
/// and its log bias.
struct VoxelGrad {
    s0: f64,
    fractions: Vec<f64>,
    dirs: Vec<[f64; 3]>,
    f_intra: f64,
    log_bias: f64,
}

struct VoxelCtx<'a> {
    y: &'a [f64],
    cache: &'a SchemeCache,
    scales: &'a [f64],
    beta: &'a [f64],
    bias: f64,
    mode: LossMode,
    sigma: f64,
    norm: f64,
}

fn data_term_voxel(cv: &ConstrainedVoxel, ctx: &VoxelCtx, out: &mut ChunkOut, want_grad: bool) -> Option<VoxelGrad> {
    let k = cv.k();
    let consts = &ctx.cache.consts;
    let f = &cv.fractions;
    let fi = cv.f_intra;
    let mut vg = want_grad.then(|| VoxelGrad {
        s0: 0.0,
        fractions: vec![0.0; k + 3],
        dirs: vec![[0.0; 3]; k],
        f_intra: 0.0,
        log_bias: 0.0,
    });
    let mut cos = [0.0; 8];
    let mut stick = [0.0; 8];
    let mut zep = [0.0; 8];
    let mut cos_v = vec![0.0; if k > 8 { k } else { 0 }];
    let mut stick_v = cos_v.clone();
    let mut zep_v = cos_v.clone();
    let (cos, stick, zep): (&mut [f64], &mut [f64], &mut [f64]) = if k > 8 {
        (&mut cos_v, &mut stick_v, &mut zep_v)
    } else {
        (&mut cos[..k], &mut stick[..k], &mut zep[..k])
    };

    for n in 0..ctx.y.len() {
        let b = ctx.cache.b[n];
        let g = &ctx.cache.g[n];
        let (e_csf, e_gm, e_res) = (ctx.cache.e_csf[n], ctx.cache.e_gm[n], ctx.cache.e_res[n]);
        let mut mix = f[0] * e_csf + f[1] * e_gm + f[k + 2] * e_res;
        for j in 0..k {
            if b == 0.0 {
                cos[j] = 0.0;
                stick[j] = 1.0;
                zep[j] = 1.0;
            } else {
                let c = dot3(&cv.dirs[j], g);
                let c2 = c * c;
                cos[j] = c;
                stick[j] = (-b * consts.d_par * c2).exp();
                zep[j] = stick[j] * (-b * consts.d_perp * (1.0 - c2)).exp();
            }
            mix += f[2 + j] * (fi * stick[j] + (1.0 - fi) * zep[j]);
        }
        let s = cv.s0 * mix;
        let scale = ctx.scales[n] * ctx.bias;
        let y_hat = scale * s + ctx.beta[n];
        let y = ctx.y[n];
        let upstream = match ctx.mode {
            LossMode::Mse => {
                let r = y_hat - y;
                out.value += ctx.norm * r * r;
                2.0 * ctx.norm * r
            }
            LossMode::Nll => {
                let (value, d_yhat, d_sigma) = rician_term(y, y_hat, ctx.sigma);
                out.value += value;
                if want_grad {
                    out.g_sigma_log += d_sigma;
                }
                d_yhat
            }
        };
        let Some(vg) = vg.as_mut() else { continue };
        out.g_beta[n] += upstream;
        out.g_alpha[n] += upstream * scale * s;
        vg.log_bias += upstream * scale * s;
        let h = upstream * scale;
        vg.s0 += h * mix;
        let hs = h * cv.s0;
        vg.fractions[0] += hs * e_csf;
        vg.fractions[1] += hs * e_gm;
        vg.fractions[k + 2] += hs * e_res;
        for j in 0..k {
            vg.fractions[2 + j] += hs * (fi * stick[j] + (1.0 - fi) * zep[j]);
            if b == 0.0 {
                continue;
            }
            vg.f_intra += hs * f[2 + j] * (stick[j] - zep[j]);
            // dE/dcos = -2 b cos (fi D_par stick + (1 - fi)(D_par - D_perp) zep)
            let de_dc = -2.0
                * b
                * cos[j]
                * (fi * consts.d_par * stick[j] + (1.0 - fi) * (consts.d_par - consts.d_perp) * zep[j]);
            let gc = hs * f[2 + j] * de_dc;
            for a in 0..3 {
                vg.dirs[j][a] += gc * g[a];
            }
        }
    }
    vg
}

/// Chains constrained-space derivatives through softplus, softmax,
/// direction normalization and sigmoid.
fn backprop_constraints(
    raw: &TissueParams,
    field: &ConstrainedField,
    cg: &ConstrainedGrad,
    masked: &[usize],
    out: &mut TissueParams,
) {
    let k = raw.k;
    let nf = k + 3;
    for &v in masked {
        out.s0_raw[v] = cg.s0[v] * crate::model::sigmoid(raw.s0_raw[v]);

        let f = field.fractions(v);
        let gf = &cg.fractions[v * nf..(v + 1) * nf];
        let inner: f64 = f.iter().zip(gf).map(|(a, b)| a * b).sum();
        for c in 0..nf {
            out.fraction_logits[v * nf + c] = f[c] * (gf[c] - inner);
        }

        for j in 0..k {
            let r = raw.dir(v, j);
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let gd = cg.dirs[v * k + j];
            let o = (v * k + j) * 3;
            if n > DIR_NORM_FLOOR {
                let d = field.dirs(v)[j];
                let proj = dot3(&d, &gd);
                for a in 0..3 {
                    out.dir_raw[o + a] = (gd[a] - d[a] * proj) / n;
                }
            } else {
                for a in 0..3 {
                    out.dir_raw[o + a] = gd[a] / DIR_NORM_FLOOR;
                }
            }
        }

        let fi = field.f_intra[v];
        out.f_intra_raw[v] = cg.f_intra[v] * fi * (1.0 - fi);
    }
}

/// Worst finite-difference discrepancy within one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub probes: usize,
    /// `|analytic - fd| / max(|analytic|, |fd|, 1e-4)`: below 1e-3 means the
    /// probe passes at relative 1e-3 or absolute 1e-7, whichever is looser.
    pub max_discrepancy: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
}

impl FdReport {
    pub fn max_discrepancy(&self) -> f64 {
        self.groups.iter().map(|g| g.max_discrepancy).fold(0.0, f64::max)
    }

    pub fn total_probes(&self) -> usize {
        self.groups.iter().map(|g| g.probes).sum()
    }
}

/// Probe floor below which discrepancies are judged in absolute terms.
const FD_SCALE_FLOOR: f64 = 1e-4;

/// Compares analytic gradients with five-point central differences of step
/// `h` at `n_probes` randomly chosen scalars of every active parameter group.
/// Tissue probes are drawn from masked voxels only.
pub fn fd_check(problem: &Problem, params: &ParamSet, h: f64, n_probes: usize, seed: u64) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = problem.gradient(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.tissue.k;
    let masked = problem.masked();
    let mut groups = Vec::new();
    for (gi, name) in GROUP_NAMES.iter().enumerate() {
        let active = match gi {
            0..=3 => true,
            4..=6 => problem.calibration.intensity,
            _ => problem.calibration.sigma && problem.mode == LossMode::Nll,
        };
        if !active {
            continue;
        }
        let per_voxel = [1, k + 3, 3 * k, 1];
        let mut check = GroupCheck { group: name.to_string(), probes: 0, max_discrepancy: 0.0, max_abs_error: 0.0 };
        for _ in 0..n_probes {
            let index = if gi < 4 {
                let v = masked[rng.random_range(0..masked.len())];
                v * per_voxel[gi] + rng.random_range(0..per_voxel[gi])
            } else if gi == 5 || gi == 6 {
                let free: Vec<usize> = (0..problem.pinned.len()).filter(|&n| !problem.pinned[n]).collect();
                if free.is_empty() {
                    continue;
                }
                free[rng.random_range(0..free.len())]
            } else {
                rng.random_range(0..params.groups()[gi].len())
            };
            let at = |offset: f64| -> Result<f64> {
                let mut p = params.clone();
                p.groups_mut()[gi][index] += offset;
                Ok(problem.objective(&p)?.total)
            };
            let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            let a = analytic.groups()[gi][index];
            let abs = (a - fd).abs();
            let disc = abs / a.abs().max(fd.abs()).max(FD_SCALE_FLOOR);
            check.probes += 1;
            check.max_discrepancy = check.max_discrepancy.max(disc);
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        groups.push(check);
    }
    Ok(FdReport { step: h, groups })
}

/// Convenience wrapper: total objective and breakdown for raw parameters on
/// b0-normalized data, with the bias grid spanning `data`.
pub fn total_objective(
    tissue: &TissueParams,
    cal: &CalibrationParams,
    data: &SignalVolume,
    scheme: &AcquisitionScheme,
    consts: &ModelConstants,
    mode: LossMode,
    weights: RegWeights,
) -> Result<Breakdown> {
    let problem = Problem::new(
        data.clone(),
        scheme,
        consts,
        mode,
        weights,
        CalibrationUse { intensity: true, sigma: true },
        BiasGeometry::whole(data.dims),
    )?;
    problem.objective(&ParamSet { tissue: tissue.clone(), cal: cal.clone() })
}

/// A random but well-conditioned parameter state with random data, for
/// gradient checks. Voxel 0 is left out of the mask.
pub fn random_state(dims: [usize; 3], k: usize, scheme: &AcquisitionScheme, seed: u64) -> Result<(SignalVolume, ParamSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_vox: usize = dims.iter().product();
    let n = scheme.len();
    let mut tissue = TissueParams::zeros(n_vox, k);
    for v in tissue.s0_raw.iter_mut() {
        *v = 0.5 + 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    for v in tissue.fraction_logits.iter_mut().chain(tissue.dir_raw.iter_mut()).chain(tissue.f_intra_raw.iter_mut()) {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    let mut cal = CalibrationParams::identity(n, 0.08);
    for v in cal.bias_grid.iter_mut() {
        *v = 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    for v in cal.alpha.iter_mut() {
        *v = 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    for v in cal.beta.iter_mut() {
        *v = 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let data: Vec<f64> = (0..n_vox * n).map(|_| rng.random_range(0.05..0.9)).collect();
    let mut mask = vec![true; n_vox];
    if n_vox > 1 {
        mask[0] = false;
    }
    Ok((SignalVolume::new(dims, n, data, mask)?, ParamSet { tissue, cal }))
}
