//! Synthetic crossing-fiber benchmark: multi-tensor signals, Rician noise and
//! per-measurement gain perturbation, with ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionScheme;
use crate::error::{Error, Result};
use crate::model::{dot3, norm3};
use crate::volume::{flat_grid_dims, SignalVolume};

/// Stream id reserved for the gain draw; voxel streams use their index.
const GAIN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Crossing angles in degrees.
    pub angles: Vec<f64>,
    pub voxels_per_angle: usize,
    pub include_single_fiber: bool,
    /// S0 / sigma on b0-normalized data. Infinite means noiseless.
    pub snr: f64,
    /// Tensor eigenvalues in mm^2/s, axial first.
    pub eigenvalues: [f64; 3],
    /// Log-gain standard deviation; 0 disables the perturbation.
    pub sigma_g: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            angles: (0..16).map(|i| 15.0 + 5.0 * i as f64).collect(),
            voxels_per_angle: 200,
            include_single_fiber: true,
            snr: 30.0,
            eigenvalues: [1.7e-3, 0.3e-3, 0.3e-3],
            sigma_g: 0.0,
            seed: 1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() && !self.include_single_fiber {
            return Err(Error::Config("phantom has no voxels".into()));
        }
        if let Some(a) = self.angles.iter().find(|&&a| !(a > 0.0 && a <= 90.0)) {
            return Err(Error::Config(format!("crossing angle {a} outside (0, 90]")));
        }
        if self.voxels_per_angle == 0 {
            return Err(Error::Config("voxels_per_angle must be positive".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config("snr must be positive".into()));
        }
        let e = self.eigenvalues;
        if !(e[2] > 0.0 && e[1] >= e[2] && e[0] >= e[1] && e[0].is_finite()) {
            return Err(Error::Config("eigenvalues must be positive and descending".into()));
        }
        if !(self.sigma_g >= 0.0 && self.sigma_g.is_finite()) {
            return Err(Error::Config("sigma_g must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        1.0 / self.snr
    }

    pub fn n_voxels(&self) -> usize {
        self.voxels_per_angle * (self.angles.len() + self.include_single_fiber as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthVoxel {
    /// Crossing angle in degrees; `None` for single-fiber controls.
    pub angle: Option<f64>,
    pub directions: Vec<[f64; 3]>,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dims: [usize; 3],
    pub sigma: f64,
    pub snr: f64,
    pub sigma_g: f64,
    /// Per-measurement gains; all ones when unperturbed.
    pub gains: Vec<f64>,
    pub voxels: Vec<TruthVoxel>,
}

impl GroundTruth {
    /// Distinct crossing angles in first-appearance order.
    pub fn angles(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for v in &self.voxels {
            if let Some(a) = v.angle {
                if !out.contains(&a) {
                    out.push(a);
                }
            }
        }
        out
    }
}

fn perpendicular_frame(d: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let c = dot3(&helper, d);
    let mut e2 = [helper[0] - c * d[0], helper[1] - c * d[1], helper[2] - c * d[2]];
    let n = norm3(&e2);
    e2.iter_mut().for_each(|x| *x /= n);
    (e2, cross(d, &e2))
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Noise-free signal (S0 = 1) of a mixture of tensors with axes `directions`.
pub fn multi_tensor_signal(
    directions: &[[f64; 3]],
    fractions: &[f64],
    eigenvalues: [f64; 3],
    scheme: &AcquisitionScheme,
) -> Vec<f64> {
    let frames: Vec<_> = directions.iter().map(|d| (d, perpendicular_frame(d))).collect();
    scheme
        .b_values()
        .iter()
        .zip(scheme.directions())
        .map(|(&b, g)| {
            frames
                .iter()
                .zip(fractions)
                .map(|((d, (e2, e3)), &f)| {
                    let q = eigenvalues[0] * dot3(g, d).powi(2)
                        + eigenvalues[1] * dot3(g, e2).powi(2)
                        + eigenvalues[2] * dot3(g, e3).powi(2);
                    f * (-b * q).exp()
                })
                .sum()
        })
        .collect()
}

/// Magnitude of the signal plus complex Gaussian noise of std `1 / snr`.
pub fn add_rician_noise<R: Rng + ?Sized>(clean: &[f64], snr: f64, rng: &mut R) -> Vec<f64> {
    let sigma = 1.0 / snr;
    if sigma == 0.0 {
        return clean.to_vec();
    }
    clean
        .iter()
        .map(|&s| {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            (s + sigma * e1).hypot(sigma * e2)
        })
        .collect()
}

/// Multiplies measurement `n` of every voxel by `exp(z_n)`, `z_n ~ N(0, sigma_g^2)`.
pub fn gain_perturb<R: Rng + ?Sized>(data: &mut SignalVolume, sigma_g: f64, rng: &mut R) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sigma_g).map_err(|e| Error::Config(format!("sigma_g: {e}")))?;
    let gains: Vec<f64> = (0..data.n_meas).map(|_| normal.sample(rng).exp()).collect();
    for v in 0..data.n_voxels() {
        data.voxel_mut(v).iter_mut().zip(&gains).for_each(|(s, g)| *s *= g);
    }
    Ok(gains)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let d: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = norm3(&d);
        if n > 1e-6 {
            return [d[0] / n, d[1] / n, d[2] / n];
        }
    }
}

/// A random fiber pair separated by `angle_deg`.
fn crossing_pair<R: Rng + ?Sized>(angle_deg: f64, rng: &mut R) -> [[f64; 3]; 2] {
    let d1 = random_unit(rng);
    let axis = loop {
        let u = random_unit(rng);
        let c = dot3(&u, &d1);
        let w = [u[0] - c * d1[0], u[1] - c * d1[1], u[2] - c * d1[2]];
        let n = norm3(&w);
        if n > 1e-3 {
            break [w[0] / n, w[1] / n, w[2] / n];
        }
    };
    let (s, c) = angle_deg.to_radians().sin_cos();
    let wx = cross(&axis, &d1);
    let d2 = [c * d1[0] + s * wx[0], c * d1[1] + s * wx[1], c * d1[2] + s * wx[2]];
    [d1, d2]
}

/// Generates the benchmark volume (raw, not b0-normalized) and its ground truth.
pub fn build_benchmark(spec: &PhantomSpec, scheme: &AcquisitionScheme) -> Result<(SignalVolume, GroundTruth)> {
    spec.validate()?;
    let n_vox = spec.n_voxels();
    let n_meas = scheme.len();
    let dims = flat_grid_dims(n_vox);
    let angle_of = |v: usize| spec.angles.get(v / spec.voxels_per_angle).copied();

    let voxels: Vec<(TruthVoxel, Vec<f64>)> = (0..n_vox)
        .into_par_iter()
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(v as u64);
            let angle = angle_of(v);
            let (directions, fractions) = match angle {
                Some(a) => (crossing_pair(a, &mut rng).to_vec(), vec![0.5, 0.5]),
                None => (vec![random_unit(&mut rng)], vec![1.0]),
            };
            let clean = multi_tensor_signal(&directions, &fractions, spec.eigenvalues, scheme);
            let noisy = add_rician_noise(&clean, spec.snr, &mut rng);
            (TruthVoxel { angle, directions, fractions }, noisy)
        })
        .collect();

    let mut data = Vec::with_capacity(n_vox * n_meas);
    let mut truth_voxels = Vec::with_capacity(n_vox);
    for (t, s) in voxels {
        data.extend_from_slice(&s);
        truth_voxels.push(t);
    }
    let mut volume = SignalVolume::new(dims, n_meas, data, vec![true; n_vox])?;
    let gains = if spec.sigma_g > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(GAIN_STREAM);
        gain_perturb(&mut volume, spec.sigma_g, &mut rng)?
    } else {
        vec![1.0; n_meas]
    };
    let truth = GroundTruth {
        dims,
        sigma: spec.sigma(),
        snr: spec.snr,
        sigma_g: spec.sigma_g,
        gains,
        voxels: truth_voxels,
    };
    Ok((volume, truth))
}

/// Voxels with `fractions.len()` fibers at independent random orientations,
/// on a flat grid with an all-true mask. Raw signal with S0 = 1.
pub fn random_fiber_patch(
    n_voxels: usize,
    fractions: &[f64],
    eigenvalues: [f64; 3],
    snr: f64,
    scheme: &AcquisitionScheme,
    seed: u64,
) -> Result<SignalVolume> {
    if n_voxels == 0 || fractions.is_empty() || !(snr > 0.0) {
        return Err(Error::Config("patch needs voxels, fibers and a positive snr".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n_voxels)
        .into_par_iter()
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(v as u64);
            let dirs: Vec<[f64; 3]> = fractions.iter().map(|_| random_unit(&mut rng)).collect();
            let clean = multi_tensor_signal(&dirs, fractions, eigenvalues, scheme);
            add_rician_noise(&clean, snr, &mut rng)
        })
        .collect();
    let data = rows.concat();
    SignalVolume::new(flat_grid_dims(n_voxels), scheme.len(), data, vec![true; n_voxels])
}
