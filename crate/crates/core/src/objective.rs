//! Data-fidelity terms and regularizers.
//!
//! Regularizers act on constrained fields and, when given a
//! [`ConstrainedGrad`], accumulate their derivatives with respect to the
//! constrained quantities (S0, fractions, unit directions). Back-propagation
//! to raw parameters happens in [`crate::gradient`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot3, sigmoid, CalibrationParams, ConstrainedField, BIAS_GRID, BIAS_GRID_LEN};
use crate::special::{bessel_ratio, log_i0_unchecked};
use crate::volume::{voxel_coords, SignalVolume};

/// S0 level below which the orphan-WM gate opens.
pub const ORPHAN_S0_LOW: f64 = 0.1;
/// Width of the orphan-WM sigmoid gate.
pub const ORPHAN_GATE_WIDTH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Mse,
    Nll,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossMode::Mse),
            "nll" | "rician" => Ok(LossMode::Nll),
            other => Err(Error::Config(format!("unknown loss mode {other:?} (expected mse or nll)"))),
        }
    }
}

/// Regularizer weights. Every weight may be set to zero to disable its term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegWeights {
    pub lambda_sp: f64,
    pub lambda_rep: f64,
    pub lambda_sparse: f64,
    pub tau: f64,
    pub lambda_orphan: f64,
    pub lambda_cont: f64,
    pub lambda_order: f64,
    pub huber_delta: f64,
    /// 6 or 26.
    pub neighborhood: u8,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda_bias_l2: f64,
    pub lambda_bias_tv: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            lambda_sp: 0.01,
            lambda_rep: 0.01,
            lambda_sparse: 0.02,
            tau: 0.15,
            lambda_orphan: 0.01,
            lambda_cont: 0.005,
            lambda_order: 0.01,
            huber_delta: 0.05,
            neighborhood: 6,
            lambda_alpha: 0.03,
            lambda_beta: 1.0,
            lambda_bias_l2: 0.1,
            lambda_bias_tv: 0.1,
        }
    }
}

impl RegWeights {
    /// All tissue and calibration penalties off.
    pub fn none() -> Self {
        Self {
            lambda_sp: 0.0,
            lambda_rep: 0.0,
            lambda_sparse: 0.0,
            lambda_orphan: 0.0,
            lambda_cont: 0.0,
            lambda_order: 0.0,
            lambda_alpha: 0.0,
            lambda_beta: 0.0,
            lambda_bias_l2: 0.0,
            lambda_bias_tv: 0.0,
            ..Self::default()
        }
    }

    /// Direction repulsion only, as used for the synthetic benchmark.
    pub fn repulsion_only() -> Self {
        Self { lambda_rep: 0.01, ..Self::none() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_sp,
            self.lambda_rep,
            self.lambda_sparse,
            self.tau,
            self.lambda_orphan,
            self.lambda_cont,
            self.lambda_order,
            self.huber_delta,
            self.lambda_alpha,
            self.lambda_beta,
            self.lambda_bias_l2,
            self.lambda_bias_tv,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("regularizer weights must be finite and non-negative".into()));
        }
        if self.huber_delta == 0.0 {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        Neighborhood::try_from(self.neighborhood)?;
        Ok(())
    }

    pub fn neighborhood(&self) -> Neighborhood {
        Neighborhood::try_from(self.neighborhood).unwrap_or(Neighborhood::Six)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    Six,
    TwentySix,
}

impl TryFrom<u8> for Neighborhood {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            6 => Ok(Neighborhood::Six),
            26 => Ok(Neighborhood::TwentySix),
            other => Err(Error::Config(format!("neighborhood must be 6 or 26, got {other}"))),
        }
    }
}

impl Neighborhood {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Neighborhood::Six => manhattan == 1,
                        Neighborhood::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// In-mask neighbor lists for every masked voxel of a grid.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn new(dims: [usize; 3], mask: &[bool], hood: Neighborhood) -> Self {
        let offsets = hood.offsets();
        let neighbors = (0..mask.len())
            .map(|i| {
                if !mask[i] {
                    return Vec::new();
                }
                let c = voxel_coords(dims, i);
                offsets
                    .iter()
                    .filter_map(|o| {
                        let x = c[0] as i64 + o[0];
                        let y = c[1] as i64 + o[1];
                        let z = c[2] as i64 + o[2];
                        if x < 0 || y < 0 || z < 0 {
                            return None;
                        }
                        let (x, y, z) = (x as usize, y as usize, z as usize);
                        if x >= dims[0] || y >= dims[1] || z >= dims[2] {
                            return None;
                        }
                        let j = x + dims[0] * (y + dims[1] * z);
                        mask[j].then_some(j)
                    })
                    .collect()
            })
            .collect();
        Self { neighbors }
    }

    pub fn n_pairs(&self) -> usize {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| nb.iter().filter(|&&j| j > i).count())
            .sum()
    }
}

/// Derivatives with respect to the constrained view of a field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedGrad {
    pub k: usize,
    pub s0: Vec<f64>,
    pub fractions: Vec<f64>,
    pub dirs: Vec<[f64; 3]>,
    pub f_intra: Vec<f64>,
}

impl ConstrainedGrad {
    pub fn zeros(n_vox: usize, k: usize) -> Self {
        Self {
            k,
            s0: vec![0.0; n_vox],
            fractions: vec![0.0; n_vox * (k + 3)],
            dirs: vec![[0.0; 3]; n_vox * k],
            f_intra: vec![0.0; n_vox],
        }
    }
}

fn check_shapes(a: &SignalVolume, b: &SignalVolume, mask: &[bool]) -> Result<usize> {
    if a.data.len() != b.data.len() || a.n_meas != b.n_meas || mask.len() != a.n_voxels() {
        return Err(Error::DataMismatch("prediction, data and mask shapes differ".into()));
    }
    let m = mask.iter().filter(|&&m| m).count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(m)
}

/// Mean of squared residuals over masked voxel-measurement pairs.
pub fn mse_loss(y_hat: &SignalVolume, y: &SignalVolume, mask: &[bool]) -> Result<f64> {
    let m = check_shapes(y_hat, y, mask)?;
    let mut sum = 0.0;
    for v in (0..mask.len()).filter(|&v| mask[v]) {
        for (a, b) in y_hat.voxel(v).iter().zip(y.voxel(v)) {
            sum += (a - b) * (a - b);
        }
    }
    Ok(sum / (m * y.n_meas) as f64)
}

/// One Rician NLL term and its derivatives with respect to the prediction
/// and `ln sigma`. The prediction is clamped at zero.
#[inline]
pub fn rician_term(y: f64, y_hat: f64, sigma: f64) -> (f64, f64, f64) {
    let clamped = y_hat.max(0.0);
    let s2 = sigma * sigma;
    let z = y * clamped / s2;
    let value = s2.ln() + (y * y + clamped * clamped) / (2.0 * s2) - log_i0_unchecked(z);
    let ratio = bessel_ratio(z);
    let d_yhat = if y_hat > 0.0 { (clamped - y * ratio) / s2 } else { 0.0 };
    let d_sigma_log = 2.0 - (y * y + clamped * clamped) / s2 + 2.0 * z * ratio;
    (value, d_yhat, d_sigma_log)
}

/// Rician negative log-likelihood summed over masked voxel-measurement pairs.
pub fn rician_nll(y_hat: &SignalVolume, y: &SignalVolume, sigma: f64, mask: &[bool]) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    check_shapes(y_hat, y, mask)?;
    let mut sum = 0.0;
    for v in (0..mask.len()).filter(|&v| mask[v]) {
        for (&a, &b) in y_hat.voxel(v).iter().zip(y.voxel(v)) {
            if b < 0.0 {
                return Err(Error::InvalidInput("Rician likelihood needs non-negative data".into()));
            }
            sum += rician_term(b, a, sigma).0;
        }
    }
    Ok(sum)
}

#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
pub fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

fn n_masked(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count().max(1) as f64
}

/// Huber penalty on each voxel's deviation from its in-mask neighborhood
/// mean, summed over fraction channels and averaged over the mask.
pub fn spatial_huber_laplacian(
    field: &ConstrainedField,
    mask: &[bool],
    graph: &NeighborGraph,
    lambda: f64,
    delta: f64,
    grad: Option<&mut ConstrainedGrad>,
) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let nf = field.n_fractions();
    let scale = lambda / n_masked(mask);
    // psi[v * nf + c] = rho'(residual) of the term centred at v
    let mut psi = vec![0.0; field.n_voxels() * nf];
    let mut total = 0.0;
    for v in 0..field.n_voxels() {
        let nb = &graph.neighbors[v];
        if !mask[v] || nb.is_empty() {
            continue;
        }
        let f = field.fractions(v);
        for c in 0..nf {
            let mean = nb.iter().map(|&j| field.fractions(j)[c]).sum::<f64>() / nb.len() as f64;
            let r = f[c] - mean;
            total += huber(r, delta);
            psi[v * nf + c] = huber_grad(r, delta);
        }
    }
    if let Some(g) = grad {
        for v in 0..field.n_voxels() {
            if !mask[v] {
                continue;
            }
            let nb = &graph.neighbors[v];
            for c in 0..nf {
                // own term, minus this voxel's share of each neighbour's mean
                let mut d = psi[v * nf + c];
                for &j in nb {
                    d -= psi[j * nf + c] / graph.neighbors[j].len() as f64;
                }
                g.fractions[v * nf + c] += scale * d;
            }
        }
    }
    scale * total
}

/// `sum_{i<j} f_i f_j |d_i . d_j|` over WM fibers, averaged over the mask.
pub fn repulsion(field: &ConstrainedField, mask: &[bool], lambda: f64, mut grad: Option<&mut ConstrainedGrad>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let k = field.k;
    let nf = k + 3;
    let scale = lambda / n_masked(mask);
    let mut total = 0.0;
    for v in (0..field.n_voxels()).filter(|&v| mask[v]) {
        let f = field.wm_fractions(v);
        let d = field.dirs(v);
        for i in 0..k {
            for j in (i + 1)..k {
                let c = dot3(&d[i], &d[j]);
                total += f[i] * f[j] * c.abs();
                if let Some(g) = grad.as_deref_mut() {
                    g.fractions[v * nf + 2 + i] += scale * f[j] * c.abs();
                    g.fractions[v * nf + 2 + j] += scale * f[i] * c.abs();
                    let s = scale * f[i] * f[j] * c.signum();
                    for a in 0..3 {
                        g.dirs[v * k + i][a] += s * d[j][a];
                        g.dirs[v * k + j][a] += s * d[i][a];
                    }
                }
            }
        }
    }
    scale * total
}

/// L1 penalty on WM fractions below `tau`, averaged over the mask.
pub fn minor_fiber_sparsity(
    field: &ConstrainedField,
    mask: &[bool],
    lambda: f64,
    tau: f64,
    mut grad: Option<&mut ConstrainedGrad>,
) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let nf = field.n_fractions();
    let scale = lambda / n_masked(mask);
    let mut total = 0.0;
    for v in (0..field.n_voxels()).filter(|&v| mask[v]) {
        for (i, &f) in field.wm_fractions(v).iter().enumerate() {
            if f < tau {
                total += f;
                if let Some(g) = grad.as_deref_mut() {
                    g.fractions[v * nf + 2 + i] += scale;
                }
            }
        }
    }
    scale * total
}

/// Gate that opens where S0 falls below [`ORPHAN_S0_LOW`].
#[inline]
pub fn orphan_gate(s0: f64) -> f64 {
    sigmoid((ORPHAN_S0_LOW - s0) / ORPHAN_GATE_WIDTH)
}

/// Gated total WM fraction, averaged over the mask.
pub fn orphan_wm(field: &ConstrainedField, mask: &[bool], lambda: f64, mut grad: Option<&mut ConstrainedGrad>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let nf = field.n_fractions();
    let scale = lambda / n_masked(mask);
    let mut total = 0.0;
    for v in (0..field.n_voxels()).filter(|&v| mask[v]) {
        let w = orphan_gate(field.s0[v]);
        let wm: f64 = field.wm_fractions(v).iter().sum();
        total += w * wm;
        if let Some(g) = grad.as_deref_mut() {
            for i in 0..field.k {
                g.fractions[v * nf + 2 + i] += scale * w;
            }
            g.s0[v] += -scale * wm * w * (1.0 - w) / ORPHAN_GATE_WIDTH;
        }
    }
    scale * total
}

/// Index-matched fiber alignment between neighboring voxels, averaged over
/// unordered in-mask neighbor pairs.
pub fn directional_continuity(
    field: &ConstrainedField,
    graph: &NeighborGraph,
    lambda: f64,
    mut grad: Option<&mut ConstrainedGrad>,
) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let pairs = graph.n_pairs();
    if pairs == 0 {
        return 0.0;
    }
    let k = field.k;
    let nf = k + 3;
    let scale = lambda / pairs as f64;
    let mut total = 0.0;
    for v in 0..field.n_voxels() {
        for &u in graph.neighbors[v].iter().filter(|&&u| u > v) {
            let (fv, fu) = (field.wm_fractions(v), field.wm_fractions(u));
            let (dv, du) = (field.dirs(v), field.dirs(u));
            for i in 0..k {
                let c = dot3(&dv[i], &du[i]);
                let mis = 1.0 - c.abs();
                total += fv[i] * fu[i] * mis;
                if let Some(g) = grad.as_deref_mut() {
                    g.fractions[v * nf + 2 + i] += scale * fu[i] * mis;
                    g.fractions[u * nf + 2 + i] += scale * fv[i] * mis;
                    let s = -scale * fv[i] * fu[i] * c.signum();
                    for a in 0..3 {
                        g.dirs[v * k + i][a] += s * du[i][a];
                        g.dirs[u * k + i][a] += s * dv[i][a];
                    }
                }
            }
        }
    }
    scale * total
}

/// Hinge on out-of-order adjacent WM fractions, averaged over the mask.
pub fn fiber_ordering(field: &ConstrainedField, mask: &[bool], lambda: f64, mut grad: Option<&mut ConstrainedGrad>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let nf = field.n_fractions();
    let scale = lambda / n_masked(mask);
    let mut total = 0.0;
    for v in (0..field.n_voxels()).filter(|&v| mask[v]) {
        let f = field.wm_fractions(v);
        for i in 0..field.k.saturating_sub(1) {
            let gap = f[i + 1] - f[i];
            if gap > 0.0 {
                total += gap;
                if let Some(g) = grad.as_deref_mut() {
                    g.fractions[v * nf + 3 + i] += scale;
                    g.fractions[v * nf + 2 + i] -= scale;
                }
            }
        }
    }
    scale * total
}

/// Squared-forward-difference smoothness of the upsampled log bias field,
/// held as a dense quadratic form over the control grid.
#[derive(Debug, Clone)]
pub struct BiasTv {
    q: Vec<f64>,
}

impl BiasTv {
    /// Builds the form for a volume of shape `dims`: the sum over axes of
    /// the mean squared forward difference along that axis. Trilinear
    /// weights factor per axis, so the form is a sum of Kronecker products
    /// of 1-D Gram matrices.
    pub fn new(dims: [usize; 3]) -> Self {
        let g = BIAS_GRID;
        let gram = |n: usize| {
            let mut m = vec![0.0; g * g];
            for c in 0..n {
                let w = axis_weights(c, n);
                for i in 0..g {
                    for j in 0..g {
                        m[i * g + j] += w[i] * w[j];
                    }
                }
            }
            m
        };
        let diff_gram = |n: usize| {
            let mut m = vec![0.0; g * g];
            for c in 0..n.saturating_sub(1) {
                let (a, b) = (axis_weights(c, n), axis_weights(c + 1, n));
                for i in 0..g {
                    for j in 0..g {
                        m[i * g + j] += (b[i] - a[i]) * (b[j] - a[j]);
                    }
                }
            }
            m
        };
        let grams: Vec<Vec<f64>> = dims.iter().map(|&n| gram(n)).collect();
        let n = BIAS_GRID_LEN;
        let mut q = vec![0.0; n * n];
        for axis in 0..3 {
            if dims[axis] < 2 {
                continue;
            }
            let count: usize = (0..3).map(|a| if a == axis { dims[a] - 1 } else { dims[a] }).product();
            let scale = 1.0 / count as f64;
            let mut factors = grams.clone();
            factors[axis] = diff_gram(dims[axis]);
            for i in 0..n {
                let (ix, iy, iz) = (i % g, (i / g) % g, i / (g * g));
                for j in 0..n {
                    let (jx, jy, jz) = (j % g, (j / g) % g, j / (g * g));
                    q[i * n + j] += scale
                        * factors[0][ix * g + jx]
                        * factors[1][iy * g + jy]
                        * factors[2][iz * g + jz];
                }
            }
        }
        Self { q }
    }

    /// The form ignores constant offsets, so it is applied to `grid - grid[0]`
    /// and a constant grid gives exactly 0.
    fn centred(grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|g| g - grid[0]).collect()
    }

    pub fn value(&self, grid: &[f64]) -> f64 {
        let n = BIAS_GRID_LEN;
        let grid = Self::centred(grid);
        let mut total = 0.0;
        for i in 0..n {
            if grid[i] == 0.0 {
                continue;
            }
            let row = &self.q[i * n..(i + 1) * n];
            total += grid[i] * row.iter().zip(&grid).map(|(a, b)| a * b).sum::<f64>();
        }
        total
    }

    pub fn add_grad(&self, grid: &[f64], scale: f64, out: &mut [f64]) {
        let n = BIAS_GRID_LEN;
        let grid = Self::centred(grid);
        for i in 0..n {
            let row = &self.q[i * n..(i + 1) * n];
            out[i] += 2.0 * scale * row.iter().zip(&grid).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Interpolation weights of voxel coordinate `c` on one grid axis.
fn axis_weights(c: usize, n: usize) -> [f64; BIAS_GRID] {
    let g = (BIAS_GRID - 1) as f64;
    let u = if n > 1 { c as f64 * g / (n - 1) as f64 } else { 0.5 * g };
    let lo = (u.floor() as usize).min(BIAS_GRID - 2);
    let t = u - lo as f64;
    let mut w = [0.0; BIAS_GRID];
    w[lo] = 1.0 - t;
    w[lo + 1] = t;
    w
}

/// Identity-anchoring penalties on the calibration parameters.
pub fn calibration_penalty(
    cal: &CalibrationParams,
    tv: Option<&BiasTv>,
    weights: &RegWeights,
    grad: Option<&mut CalibrationParams>,
) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut total = weights.lambda_alpha * sq(&cal.alpha) + weights.lambda_beta * sq(&cal.beta);
    total += weights.lambda_bias_l2 * sq(&cal.bias_grid);
    let tv = tv.filter(|_| weights.lambda_bias_tv > 0.0 && cal.bias_grid.iter().any(|&b| b != 0.0));
    if let Some(tv) = tv {
        total += weights.lambda_bias_tv * tv.value(&cal.bias_grid);
    }
    if let Some(g) = grad {
        for (g, a) in g.alpha.iter_mut().zip(&cal.alpha) {
            *g += 2.0 * weights.lambda_alpha * a;
        }
        for (g, b) in g.beta.iter_mut().zip(&cal.beta) {
            *g += 2.0 * weights.lambda_beta * b;
        }
        for (g, b) in g.bias_grid.iter_mut().zip(&cal.bias_grid) {
            *g += 2.0 * weights.lambda_bias_l2 * b;
        }
        if let Some(tv) = tv {
            tv.add_grad(&cal.bias_grid, weights.lambda_bias_tv, &mut g.bias_grid);
        }
    }
    total
}
