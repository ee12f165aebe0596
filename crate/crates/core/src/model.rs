//! Forward model: constrained tissue parameters, compartment attenuations,
//! the calibration chain, and whole-volume prediction.
//!
//! Fractions are always ordered `[CSF, GM, WM_1..WM_K, restricted]`.

use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionScheme;
use crate::error::{Error, Result};
use crate::volume::{voxel_coords, SignalVolume};

/// Control points per axis of the bias-field grid.
pub const BIAS_GRID: usize = 8;
pub const BIAS_GRID_LEN: usize = BIAS_GRID * BIAS_GRID * BIAS_GRID;

/// Lower clamp on the raw direction norm during normalization.
pub const DIR_NORM_FLOOR: f64 = 1e-8;

/// Fixed compartment diffusivities in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConstants {
    pub d_csf: f64,
    pub d_gm: f64,
    pub d_res: f64,
    pub d_par: f64,
    pub d_perp: f64,
}

impl Default for ModelConstants {
    fn default() -> Self {
        Self { d_csf: 3.0e-3, d_gm: 0.9e-3, d_res: 0.2e-3, d_par: 1.7e-3, d_perp: 0.4e-3 }
    }
}

impl ModelConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.d_csf, self.d_gm, self.d_res, self.d_par, self.d_perp];
        if all.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Config("diffusivities must be positive".into()));
        }
        if self.d_par <= self.d_perp {
            return Err(Error::Config("axial diffusivity must exceed radial diffusivity".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax into `out`.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

#[inline]
pub fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Raw (unconstrained) per-voxel tissue parameters for a block of voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub k: usize,
    pub s0_raw: Vec<f64>,
    /// `K + 3` logits per voxel.
    pub fraction_logits: Vec<f64>,
    /// `K` raw 3-vectors per voxel, flattened.
    pub dir_raw: Vec<f64>,
    pub f_intra_raw: Vec<f64>,
}

impl TissueParams {
    pub fn zeros(n_vox: usize, k: usize) -> Self {
        Self {
            k,
            s0_raw: vec![0.0; n_vox],
            fraction_logits: vec![0.0; n_vox * (k + 3)],
            dir_raw: vec![0.0; n_vox * k * 3],
            f_intra_raw: vec![0.0; n_vox],
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.s0_raw.len()
    }

    pub fn n_fractions(&self) -> usize {
        self.k + 3
    }

    pub fn logits(&self, v: usize) -> &[f64] {
        let nf = self.k + 3;
        &self.fraction_logits[v * nf..(v + 1) * nf]
    }

    pub fn dir(&self, v: usize, fiber: usize) -> [f64; 3] {
        let o = (v * self.k + fiber) * 3;
        [self.dir_raw[o], self.dir_raw[o + 1], self.dir_raw[o + 2]]
    }

    pub fn is_finite(&self) -> bool {
        self.s0_raw
            .iter()
            .chain(&self.fraction_logits)
            .chain(&self.dir_raw)
            .chain(&self.f_intra_raw)
            .all(|v| v.is_finite())
    }

    /// Constrained view of one voxel.
    pub fn constrain_voxel(&self, v: usize) -> ConstrainedVoxel {
        let nf = self.k + 3;
        let mut fractions = vec![0.0; nf];
        softmax(self.logits(v), &mut fractions);
        let mut dirs = Vec::with_capacity(self.k);
        let mut dir_norms = Vec::with_capacity(self.k);
        for f in 0..self.k {
            let r = self.dir(v, f);
            let n = norm3(&r).max(DIR_NORM_FLOOR);
            dirs.push([r[0] / n, r[1] / n, r[2] / n]);
            dir_norms.push(norm3(&r));
        }
        ConstrainedVoxel {
            s0: softplus(self.s0_raw[v]),
            fractions,
            dirs,
            dir_norms,
            f_intra: sigmoid(self.f_intra_raw[v]),
        }
    }

    /// Constrained view of every voxel.
    pub fn constrain(&self) -> Result<ConstrainedField> {
        if !self.is_finite() {
            return Err(Error::NonFinite("tissue parameters"));
        }
        let n = self.n_voxels();
        let nf = self.k + 3;
        let mut field = ConstrainedField {
            k: self.k,
            s0: vec![0.0; n],
            fractions: vec![0.0; n * nf],
            dirs: vec![[0.0; 3]; n * self.k],
            f_intra: vec![0.0; n],
        };
        for v in 0..n {
            let c = self.constrain_voxel(v);
            field.s0[v] = c.s0;
            field.fractions[v * nf..(v + 1) * nf].copy_from_slice(&c.fractions);
            field.dirs[v * self.k..(v + 1) * self.k].copy_from_slice(&c.dirs);
            field.f_intra[v] = c.f_intra;
        }
        Ok(field)
    }
}

/// Constrained parameters of a single voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedVoxel {
    pub s0: f64,
    pub fractions: Vec<f64>,
    pub dirs: Vec<[f64; 3]>,
    /// Norms of the raw direction vectors before the floor is applied.
    pub dir_norms: Vec<f64>,
    pub f_intra: f64,
}

impl ConstrainedVoxel {
    pub fn k(&self) -> usize {
        self.dirs.len()
    }

    pub fn wm(&self) -> &[f64] {
        &self.fractions[2..2 + self.k()]
    }
}

/// Constrained parameters for a block of voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedField {
    pub k: usize,
    pub s0: Vec<f64>,
    pub fractions: Vec<f64>,
    pub dirs: Vec<[f64; 3]>,
    pub f_intra: Vec<f64>,
}

impl ConstrainedField {
    pub fn n_voxels(&self) -> usize {
        self.s0.len()
    }

    pub fn n_fractions(&self) -> usize {
        self.k + 3
    }

    pub fn fractions(&self, v: usize) -> &[f64] {
        let nf = self.k + 3;
        &self.fractions[v * nf..(v + 1) * nf]
    }

    pub fn wm_fractions(&self, v: usize) -> &[f64] {
        &self.fractions(v)[2..2 + self.k]
    }

    pub fn dirs(&self, v: usize) -> &[[f64; 3]] {
        &self.dirs[v * self.k..(v + 1) * self.k]
    }

    pub fn voxel(&self, v: usize) -> ConstrainedVoxel {
        ConstrainedVoxel {
            s0: self.s0[v],
            fractions: self.fractions(v).to_vec(),
            dirs: self.dirs(v).to_vec(),
            dir_norms: vec![1.0; self.k],
            f_intra: self.f_intra[v],
        }
    }
}

/// Volume-level nuisance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    /// Log-domain bias control points, index `gx + 8 * (gy + 8 * gz)`.
    pub bias_grid: Vec<f64>,
    /// Per-measurement log-scale.
    pub alpha: Vec<f64>,
    /// Per-measurement offset.
    pub beta: Vec<f64>,
    pub sigma_log: f64,
}

impl CalibrationParams {
    /// Identity transform with the given noise level.
    pub fn identity(n_meas: usize, sigma: f64) -> Self {
        Self {
            bias_grid: vec![0.0; BIAS_GRID_LEN],
            alpha: vec![0.0; n_meas],
            beta: vec![0.0; n_meas],
            sigma_log: sigma.ln(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bias_grid: vec![0.0; self.bias_grid.len()],
            alpha: vec![0.0; self.alpha.len()],
            beta: vec![0.0; self.beta.len()],
            sigma_log: 0.0,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_log.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.sigma_log.is_finite()
            && self.bias_grid.iter().chain(&self.alpha).chain(&self.beta).all(|v| v.is_finite())
    }

    pub fn is_identity(&self) -> bool {
        self.bias_grid.iter().chain(&self.alpha).chain(&self.beta).all(|&v| v == 0.0)
    }
}

/// Trilinear stencil mapping a voxel onto the bias control grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasStencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl BiasStencil {
    /// Stencil for voxel `coords` of a volume with shape `dims`. The grid
    /// spans the volume corner to corner; a singleton axis samples the
    /// grid centre.
    pub fn new(coords: [usize; 3], dims: [usize; 3]) -> Self {
        let g = (BIAS_GRID - 1) as f64;
        let mut lo = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = if dims[a] > 1 { coords[a] as f64 * g / (dims[a] - 1) as f64 } else { 0.5 * g };
            let l = (u.floor() as usize).min(BIAS_GRID - 2);
            lo[a] = l;
            t[a] = u - l as f64;
        }
        let mut index = [0; 8];
        let mut weight = [0.0; 8];
        for corner in 0..8 {
            let (cx, cy, cz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let wx = if cx == 1 { t[0] } else { 1.0 - t[0] };
            let wy = if cy == 1 { t[1] } else { 1.0 - t[1] };
            let wz = if cz == 1 { t[2] } else { 1.0 - t[2] };
            index[corner] = (lo[0] + cx) + BIAS_GRID * ((lo[1] + cy) + BIAS_GRID * (lo[2] + cz));
            weight[corner] = wx * wy * wz;
        }
        Self { index, weight }
    }

    #[inline]
    pub fn log_bias(&self, grid: &[f64]) -> f64 {
        self.index.iter().zip(&self.weight).map(|(&i, &w)| w * grid[i]).sum()
    }
}

/// Position of a block of voxels inside the full volume, which the bias
/// grid spans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasGeometry {
    pub full_dims: [usize; 3],
    pub z_offset: usize,
}

impl BiasGeometry {
    pub fn whole(dims: [usize; 3]) -> Self {
        Self { full_dims: dims, z_offset: 0 }
    }

    /// Stencils for every voxel of a block with shape `block_dims`.
    pub fn stencils(&self, block_dims: [usize; 3]) -> Vec<BiasStencil> {
        let n = block_dims.iter().product();
        (0..n)
            .map(|i| {
                let [x, y, z] = voxel_coords(block_dims, i);
                BiasStencil::new([x, y, z + self.z_offset], self.full_dims)
            })
            .collect()
    }
}

/// Log bias field over a volume: trilinear upsampling of the control grid.
pub fn upsample_log_bias(bias_grid: &[f64], dims: [usize; 3]) -> Vec<f64> {
    BiasGeometry::whole(dims).stencils(dims).iter().map(|s| s.log_bias(bias_grid)).collect()
}

/// Positive multiplicative bias field `B = exp(upsample(grid))`.
pub fn upsample_bias(bias_grid: &[f64], dims: [usize; 3]) -> Vec<f64> {
    upsample_log_bias(bias_grid, dims).into_iter().map(f64::exp).collect()
}

/// Per-measurement quantities shared by every voxel.
#[derive(Debug, Clone)]
pub struct SchemeCache {
    pub b: Vec<f64>,
    pub g: Vec<[f64; 3]>,
    pub e_csf: Vec<f64>,
    pub e_gm: Vec<f64>,
    pub e_res: Vec<f64>,
    pub consts: ModelConstants,
}

impl SchemeCache {
    pub fn new(scheme: &AcquisitionScheme, consts: &ModelConstants) -> Self {
        let b = scheme.b_values().to_vec();
        // b0 entries contribute unit attenuation regardless of direction
        let g = scheme
            .directions()
            .iter()
            .zip(scheme.b0_mask())
            .map(|(d, &is_b0)| if is_b0 { [0.0; 3] } else { *d })
            .collect();
        let b_eff: Vec<f64> =
            b.iter().zip(scheme.b0_mask()).map(|(&b, &is_b0)| if is_b0 { 0.0 } else { b }).collect();
        Self {
            e_csf: b_eff.iter().map(|b| (-b * consts.d_csf).exp()).collect(),
            e_gm: b_eff.iter().map(|b| (-b * consts.d_gm).exp()).collect(),
            e_res: b_eff.iter().map(|b| (-b * consts.d_res).exp()).collect(),
            b: b_eff,
            g,
            consts: *consts,
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

/// Stick-and-zeppelin attenuation for one fiber and one measurement.
#[inline]
pub fn wm_attenuation(d: &[f64; 3], f_intra: f64, b: f64, g: &[f64; 3], consts: &ModelConstants) -> f64 {
    let c = dot3(d, g);
    let c2 = c * c;
    let stick = (-b * consts.d_par * c2).exp();
    let zeppelin = (-b * (consts.d_par * c2 + consts.d_perp * (1.0 - c2))).exp();
    f_intra * stick + (1.0 - f_intra) * zeppelin
}

/// Noise-free tissue signal of one voxel for every measurement.
pub fn tissue_signal(voxel: &ConstrainedVoxel, cache: &SchemeCache, out: &mut [f64]) {
    let k = voxel.k();
    let f = &voxel.fractions;
    for (n, o) in out.iter_mut().enumerate() {
        let mut mix = f[0] * cache.e_csf[n] + f[1] * cache.e_gm[n] + f[k + 2] * cache.e_res[n];
        let b = cache.b[n];
        if b == 0.0 {
            mix += f[2..2 + k].iter().sum::<f64>();
        } else {
            for fiber in 0..k {
                mix += f[2 + fiber] * wm_attenuation(&voxel.dirs[fiber], voxel.f_intra, b, &cache.g[n], &cache.consts);
            }
        }
        *o = voxel.s0 * mix;
    }
}

/// Calibration chain `exp(alpha_n) * B * S_n + beta_n`, in place.
pub fn apply_calibration(signal: &mut [f64], cal: &CalibrationParams, bias: f64) {
    for ((s, &a), &b) in signal.iter_mut().zip(&cal.alpha).zip(&cal.beta) {
        *s = a.exp() * bias * *s + b;
    }
}

/// Predicted signal for every masked voxel of a constrained field;
/// unmasked voxels are zero.
pub fn predict_constrained(
    field: &ConstrainedField,
    cal: &CalibrationParams,
    scheme: &AcquisitionScheme,
    consts: &ModelConstants,
    dims: [usize; 3],
    mask: &[bool],
    geometry: BiasGeometry,
) -> Result<SignalVolume> {
    let n_vox: usize = dims.iter().product();
    if field.n_voxels() != n_vox || mask.len() != n_vox {
        return Err(Error::DataMismatch(format!(
            "parameter field has {} voxels, mask {}, grid {n_vox}",
            field.n_voxels(),
            mask.len()
        )));
    }
    if cal.alpha.len() != scheme.len() || cal.beta.len() != scheme.len() {
        return Err(Error::DataMismatch("calibration length differs from the scheme".into()));
    }
    let cache = SchemeCache::new(scheme, consts);
    let stencils = geometry.stencils(dims);
    let mut out = SignalVolume::zeros(dims, scheme.len());
    out.mask = mask.to_vec();
    for v in 0..n_vox {
        if !mask[v] {
            continue;
        }
        let voxel = field.voxel(v);
        let buf = out.voxel_mut(v);
        tissue_signal(&voxel, &cache, buf);
        apply_calibration(buf, cal, stencils[v].log_bias(&cal.bias_grid).exp());
    }
    Ok(out)
}

/// `constrain -> tissue_signal -> apply_calibration` for every masked voxel.
pub fn predict_volume(
    tissue: &TissueParams,
    cal: &CalibrationParams,
    scheme: &AcquisitionScheme,
    consts: &ModelConstants,
    dims: [usize; 3],
    mask: &[bool],
) -> Result<SignalVolume> {
    let field = tissue.constrain()?;
    predict_constrained(&field, cal, scheme, consts, dims, mask, BiasGeometry::whole(dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::load_scheme;

    fn consts() -> ModelConstants {
        ModelConstants::default()
    }

    fn pure_voxel(k: usize, channel: usize) -> ConstrainedVoxel {
        let mut fractions = vec![0.0; k + 3];
        fractions[channel] = 1.0;
        ConstrainedVoxel {
            s0: 1.0,
            fractions,
            dirs: vec![[0.0, 0.0, 1.0]; k],
            dir_norms: vec![1.0; k],
            f_intra: 0.5,
        }
    }

    #[test]
    fn constrain_examples() {
        let mut t = TissueParams::zeros(1, 2);
        t.dir_raw.copy_from_slice(&[3.0, 4.0, 0.0, 0.0, 0.0, 1.0]);
        let c = t.constrain_voxel(0);
        assert!(c.fractions.iter().all(|&f| (f - 0.2).abs() < 1e-15));
        assert_eq!(c.f_intra, 0.5);
        assert!((c.dirs[0][0] - 0.6).abs() < 1e-15 && (c.dirs[0][1] - 0.8).abs() < 1e-15);
        assert!((c.s0 - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn constrain_rejects_non_finite() {
        let mut t = TissueParams::zeros(1, 1);
        t.dir_raw[0] = f64::NAN;
        assert!(t.constrain().is_err());
    }

    #[test]
    fn zero_direction_is_guarded() {
        let t = TissueParams::zeros(1, 1);
        let c = t.constrain_voxel(0);
        assert!(c.dirs[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softplus_roundtrip() {
        for &y in &[0.05, 1.0, 3.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stick_zeppelin_values() {
        let c = consts();
        let z = [0.0, 0.0, 1.0];
        let x = [1.0, 0.0, 0.0];
        assert_eq!(wm_attenuation(&z, 0.3, 0.0, &x, &c), 1.0);
        let perp = wm_attenuation(&z, 0.5, 1000.0, &x, &c);
        assert!((perp - 0.835_160_023_000_24).abs() < 1e-9, "{perp}");
        for &fi in &[0.0, 0.4, 1.0] {
            let par = wm_attenuation(&z, fi, 1000.0, &z, &c);
            assert!((par - (-1.7_f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_compartments() {
        let scheme = load_scheme("0 1000 3000", "0 1 1\n0 0 0\n0 0 0").unwrap();
        let cache = SchemeCache::new(&scheme, &consts());
        let mut out = vec![0.0; 3];
        tissue_signal(&pure_voxel(2, 0), &cache, &mut out);
        assert!((out[1] - 0.049_787_068_367_863_944).abs() < 1e-12);
        tissue_signal(&pure_voxel(2, 4), &cache, &mut out);
        assert!((out[2] - 0.548_811_636_094_026_4).abs() < 1e-12);

        let t = {
            let mut t = TissueParams::zeros(1, 2);
            t.s0_raw[0] = 0.3;
            t.fraction_logits.copy_from_slice(&[0.1, -1.0, 2.0, 0.5, 0.0]);
            t.dir_raw.copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.2, 0.1]);
            t
        };
        let v = t.constrain_voxel(0);
        tissue_signal(&v, &cache, &mut out);
        assert!((out[0] - v.s0).abs() < 1e-15);
    }

    #[test]
    fn bias_upsampling() {
        let dims = [9, 4, 3];
        assert!(upsample_bias(&vec![0.0; BIAS_GRID_LEN], dims).iter().all(|&b| b == 1.0));
        let two = upsample_bias(&vec![2f64.ln(); BIAS_GRID_LEN], dims);
        assert!(two.iter().all(|&b| (b - 2.0).abs() < 1e-12));

        let mut grid = vec![0.0; BIAS_GRID_LEN];
        for (i, g) in grid.iter_mut().enumerate() {
            *g = 2f64.ln() * (i % BIAS_GRID) as f64 / (BIAS_GRID - 1) as f64;
        }
        let field = upsample_bias(&grid, dims);
        let mid = field[4 + 9 * 5];
        assert!((mid - 2f64.sqrt()).abs() < 1e-6);
        assert!((field[0] - 1.0).abs() < 1e-12 && (field[8] - 2.0).abs() < 1e-12);
        assert!(field.iter().all(|&b| b > 0.0));
    }

    #[test]
    fn stencil_weights_sum_to_one() {
        for dims in [[1, 1, 1], [5, 7, 2], [30, 1, 60]] {
            for s in BiasGeometry::whole(dims).stencils(dims) {
                assert!((s.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn calibration_chain() {
        let cal = CalibrationParams::identity(2, 0.05);
        let mut s = vec![0.3, 0.5];
        apply_calibration(&mut s, &cal, 1.0);
        assert_eq!(s, vec![0.3, 0.5]);

        let mut cal = CalibrationParams::identity(1, 0.05);
        cal.alpha[0] = 1.1f64.ln();
        let mut s = vec![0.5];
        apply_calibration(&mut s, &cal, 1.0);
        assert!((s[0] - 0.55).abs() < 1e-12);

        let mut cal = CalibrationParams::identity(1, 0.05);
        cal.beta[0] = 0.01;
        let mut s = vec![0.0];
        apply_calibration(&mut s, &cal, 1.0);
        assert_eq!(s[0], 0.01);
    }
}
