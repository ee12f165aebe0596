//! Gradient tables (b-values, unit directions, b0 flags) in FSL convention,
//! plus synthetic multi-shell schemes with repulsion-relaxed directions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurements with b below this value (s/mm²) are treated as b0.
pub const DEFAULT_B0_THRESHOLD: f64 = 50.0;

/// Smallest scheme any fit accepts.
pub const MIN_FIT_MEASUREMENTS: usize = 7;

const RELAXATION_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScheme {
    b_values: Vec<f64>,
    directions: Vec<[f64; 3]>,
    b0_mask: Vec<bool>,
}

impl AcquisitionScheme {
    /// Builds a scheme, flagging b0 entries with `b0_threshold` and
    /// renormalizing every diffusion-weighted direction.
    pub fn new(b_values: Vec<f64>, directions: Vec<[f64; 3]>, b0_threshold: f64) -> Result<Self> {
        if b_values.len() != directions.len() {
            return Err(Error::Scheme(format!(
                "{} b-values but {} directions",
                b_values.len(),
                directions.len()
            )));
        }
        let mut b0_mask = Vec::with_capacity(b_values.len());
        let mut dirs = directions;
        for (i, (&b, d)) in b_values.iter().zip(dirs.iter_mut()).enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::Scheme(format!("b-value {b} at index {i} is not a non-negative number")));
            }
            if d.iter().any(|c| !c.is_finite()) {
                return Err(Error::Scheme(format!("direction at index {i} is not finite")));
            }
            let is_b0 = b < b0_threshold;
            b0_mask.push(is_b0);
            if is_b0 {
                continue;
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm == 0.0 {
                return Err(Error::Scheme(format!(
                    "diffusion-weighted measurement {i} (b={b}) has a zero-norm direction"
                )));
            }
            // leave already-unit vectors untouched so text round trips are exact
            if (norm - 1.0).abs() > 1e-12 {
                for c in d.iter_mut() {
                    *c /= norm;
                }
            }
        }
        Ok(Self { b_values, directions: dirs, b0_mask })
    }

    pub fn len(&self) -> usize {
        self.b_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b_values.is_empty()
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b_values
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.directions
    }

    pub fn b0_mask(&self) -> &[bool] {
        &self.b0_mask
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.b0_mask[i]).collect()
    }

    /// Fails unless the scheme has enough measurements for a model fit.
    pub fn ensure_fittable(&self) -> Result<()> {
        if self.len() < MIN_FIT_MEASUREMENTS {
            return Err(Error::Scheme(format!(
                "{} measurements; at least {MIN_FIT_MEASUREMENTS} are needed for a fit",
                self.len()
            )));
        }
        if self.b0_mask.iter().all(|&b| !b) {
            return Err(Error::Scheme("no b0 measurement for signal normalization".into()));
        }
        Ok(())
    }

    /// Restricts the scheme to the given measurement indices.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            b_values: indices.iter().map(|&i| self.b_values[i]).collect(),
            directions: indices.iter().map(|&i| self.directions[i]).collect(),
            b0_mask: indices.iter().map(|&i| self.b0_mask[i]).collect(),
        }
    }

    /// Formats the scheme as FSL `.bval` (one row) and `.bvec` (three rows) text.
    pub fn to_fsl(&self) -> (String, String) {
        let bval = join_row(self.b_values.iter().copied());
        let bvec = (0..3)
            .map(|axis| join_row(self.directions.iter().map(|d| d[axis])))
            .collect::<Vec<_>>()
            .join("\n");
        (bval + "\n", bvec + "\n")
    }
}

fn join_row(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

fn parse_row(line: &str, what: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::Scheme(format!("non-numeric token {tok:?} in {what}")))
        })
        .collect()
}

/// Parses FSL-convention gradient tables.
pub fn load_scheme(bval_text: &str, bvec_text: &str) -> Result<AcquisitionScheme> {
    load_scheme_with_threshold(bval_text, bvec_text, DEFAULT_B0_THRESHOLD)
}

pub fn load_scheme_with_threshold(
    bval_text: &str,
    bvec_text: &str,
    b0_threshold: f64,
) -> Result<AcquisitionScheme> {
    let bval_rows: Vec<&str> = bval_text.lines().filter(|l| !l.trim().is_empty()).collect();
    if bval_rows.len() != 1 {
        return Err(Error::Scheme(format!("bval must have exactly one row, found {}", bval_rows.len())));
    }
    let b_values = parse_row(bval_rows[0], "bval")?;

    let bvec_rows: Vec<&str> = bvec_text.lines().filter(|l| !l.trim().is_empty()).collect();
    if bvec_rows.len() != 3 {
        return Err(Error::Scheme(format!("bvec must have three rows, found {}", bvec_rows.len())));
    }
    let components = bvec_rows
        .iter()
        .map(|row| parse_row(row, "bvec"))
        .collect::<Result<Vec<_>>>()?;
    for (axis, row) in components.iter().enumerate() {
        if row.len() != b_values.len() {
            return Err(Error::Scheme(format!(
                "bvec row {axis} has {} entries but bval has {}",
                row.len(),
                b_values.len()
            )));
        }
    }
    let directions = (0..b_values.len())
        .map(|i| [components[0][i], components[1][i], components[2][i]])
        .collect();
    AcquisitionScheme::new(b_values, directions, b0_threshold)
}

/// Multi-shell scheme: `n_b0` b0 measurements followed by `dirs_per_shell`
/// hemisphere directions for every shell, in shell order.
pub fn synthetic_scheme(shells: &[f64], dirs_per_shell: usize, n_b0: usize, seed: u64) -> Result<AcquisitionScheme> {
    if shells.is_empty() {
        return Err(Error::InvalidInput("at least one shell is required".into()));
    }
    if dirs_per_shell < 6 {
        return Err(Error::InvalidInput(format!(
            "{dirs_per_shell} directions per shell; at least 6 are required"
        )));
    }
    let mut b_values = vec![0.0; n_b0];
    let mut directions = vec![[0.0; 3]; n_b0];
    for (shell_index, &b) in shells.iter().enumerate() {
        if !(b >= DEFAULT_B0_THRESHOLD) {
            return Err(Error::InvalidInput(format!("shell b-value {b} is below the b0 threshold")));
        }
        let dirs = repulsion_directions(dirs_per_shell, seed.wrapping_add(0x9E37_79B9 * shell_index as u64));
        b_values.extend(std::iter::repeat_n(b, dirs_per_shell));
        directions.extend(dirs);
    }
    AcquisitionScheme::new(b_values, directions, DEFAULT_B0_THRESHOLD)
}

/// Antipodally symmetric electrostatic relaxation of `n` unit vectors,
/// returned on the upper hemisphere.
pub fn repulsion_directions(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let v: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            normalize(v)
        })
        .collect();

    let mut forces = vec![[0.0; 3]; n];
    for step in 0..RELAXATION_STEPS {
        for f in forces.iter_mut() {
            *f = [0.0; 3];
        }
        for i in 0..n {
            for j in (i + 1)..n {
                for sign in [1.0, -1.0] {
                    let diff = [
                        points[i][0] - sign * points[j][0],
                        points[i][1] - sign * points[j][1],
                        points[i][2] - sign * points[j][2],
                    ];
                    let r2 = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).max(1e-12);
                    let inv_r3 = 1.0 / (r2 * r2.sqrt());
                    for a in 0..3 {
                        forces[i][a] += diff[a] * inv_r3;
                        forces[j][a] -= sign * diff[a] * inv_r3;
                    }
                }
            }
        }
        let max_force = forces
            .iter()
            .map(|f| (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt())
            .fold(0.0_f64, f64::max);
        if max_force == 0.0 {
            break;
        }
        // step shrinks linearly so the configuration settles
        let step = 0.1 * (1.0 - step as f64 / RELAXATION_STEPS as f64) + 1e-3;
        for (p, f) in points.iter_mut().zip(&forces) {
            let moved = [
                p[0] + step * f[0] / max_force,
                p[1] + step * f[1] / max_force,
                p[2] + step * f[2] / max_force,
            ];
            *p = normalize(moved);
        }
    }
    for p in points.iter_mut() {
        if p[2] < 0.0 {
            *p = [-p[0], -p[1], -p[2]];
        }
    }
    points
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Groups diffusion-weighted measurements into shells. Sorted b-values are
/// split wherever consecutive values differ by more than `tol`; each shell is
/// keyed by its rounded mean b-value.
pub fn shell_partition(scheme: &AcquisitionScheme, tol: f64) -> Result<BTreeMap<u64, Vec<usize>>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("shell tolerance must be positive, got {tol}")));
    }
    let mut order: Vec<usize> = (0..scheme.len()).filter(|&i| !scheme.b0_mask[i]).collect();
    order.sort_by(|&a, &b| scheme.b_values[a].total_cmp(&scheme.b_values[b]));

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for idx in order {
        let b = scheme.b_values[idx];
        match clusters.last_mut() {
            Some(c) if b - scheme.b_values[*c.last().unwrap()] <= tol => c.push(idx),
            _ => clusters.push(vec![idx]),
        }
    }

    let means: Vec<f64> = clusters
        .iter()
        .map(|c| c.iter().map(|&i| scheme.b_values[i]).sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        if w[1] - w[0] < 2.0 * tol {
            return Err(Error::Scheme(format!(
                "shells at b={:.1} and b={:.1} are closer than twice the tolerance {tol}",
                w[0], w[1]
            )));
        }
    }

    let mut shells = BTreeMap::new();
    for (mut cluster, mean) in clusters.into_iter().zip(means) {
        cluster.sort_unstable();
        shells.insert(mean.round() as u64, cluster);
    }
    Ok(shells)
}
