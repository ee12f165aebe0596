use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionScheme;
use crate::error::{Error, Result};

/// A 3D grid of N-measurement signal vectors with a brain mask.
///
/// Voxels are stored with x fastest, then y, then z; each voxel's
/// measurements are contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalVolume {
    pub dims: [usize; 3],
    pub n_meas: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SignalVolume {
    pub fn new(dims: [usize; 3], n_meas: usize, data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n_vox = dims[0] * dims[1] * dims[2];
        if dims.contains(&0) || n_meas == 0 {
            return Err(Error::DataMismatch(format!("empty volume shape {dims:?} x {n_meas}")));
        }
        if data.len() != n_vox * n_meas {
            return Err(Error::DataMismatch(format!(
                "{} samples for shape {dims:?} x {n_meas}",
                data.len()
            )));
        }
        if mask.len() != n_vox {
            return Err(Error::DataMismatch(format!("mask has {} voxels, volume has {n_vox}", mask.len())));
        }
        Ok(Self { dims, n_meas, data, mask })
    }

    pub fn zeros(dims: [usize; 3], n_meas: usize) -> Self {
        let n_vox = dims[0] * dims[1] * dims[2];
        Self { dims, n_meas, data: vec![0.0; n_vox * n_meas], mask: vec![true; n_vox] }
    }

    pub fn n_voxels(&self) -> usize {
        self.mask.len()
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn voxel(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_meas..(i + 1) * self.n_meas]
    }

    pub fn voxel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_meas..(i + 1) * self.n_meas]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        voxel_coords(self.dims, i)
    }

    /// Divides every voxel by the mean of its b0 measurements. Voxels whose
    /// b0 mean is not positive are removed from the mask and zeroed.
    pub fn normalize_b0(&self, scheme: &AcquisitionScheme) -> Result<Self> {
        if scheme.len() != self.n_meas {
            return Err(Error::DataMismatch(format!(
                "volume has {} measurements, scheme has {}",
                self.n_meas,
                scheme.len()
            )));
        }
        let b0 = scheme.b0_indices();
        if b0.is_empty() {
            return Err(Error::Scheme("no b0 measurement for signal normalization".into()));
        }
        let mut out = self.clone();
        for i in 0..self.n_voxels() {
            let v = out.voxel_mut(i);
            let mean = b0.iter().map(|&n| v[n]).sum::<f64>() / b0.len() as f64;
            if mean > 0.0 && mean.is_finite() {
                v.iter_mut().for_each(|s| *s /= mean);
            } else {
                v.iter_mut().for_each(|s| *s = 0.0);
                out.mask[i] = false;
            }
        }
        Ok(out)
    }

    /// Copies slices `z_start..z_end` into a new volume.
    pub fn slab(&self, z_start: usize, z_end: usize) -> Self {
        let plane = self.dims[0] * self.dims[1];
        let dims = [self.dims[0], self.dims[1], z_end - z_start];
        Self {
            dims,
            n_meas: self.n_meas,
            data: self.data[z_start * plane * self.n_meas..z_end * plane * self.n_meas].to_vec(),
            mask: self.mask[z_start * plane..z_end * plane].to_vec(),
        }
    }

    /// Joint permutation of voxels; `perm[i]` is the source voxel of output voxel `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.voxel_mut(dst).copy_from_slice(self.voxel(src));
            out.mask[dst] = self.mask[src];
        }
        out
    }
}

pub fn voxel_coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

/// A near-square `(nx, ny, 1)` grid holding exactly `n` voxels.
pub fn flat_grid_dims(n: usize) -> [usize; 3] {
    let mut nx = (n as f64).sqrt().floor() as usize;
    while nx > 1 && !n.is_multiple_of(nx) {
        nx -= 1;
    }
    let nx = nx.max(1);
    [n / nx, nx, 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::load_scheme;

    #[test]
    fn flat_grids() {
        assert_eq!(flat_grid_dims(3400), [68, 50, 1]);
        assert_eq!(flat_grid_dims(850), [34, 25, 1]);
        assert_eq!(flat_grid_dims(7), [7, 1, 1]);
        assert_eq!(flat_grid_dims(1), [1, 1, 1]);
    }

    #[test]
    fn normalizes_by_b0_and_masks_dead_voxels() {
        let scheme = load_scheme("0 1000", "0 1\n0 0\n0 0").unwrap();
        let v = SignalVolume::new([2, 1, 1], 2, vec![2.0, 1.0, 0.0, 0.5], vec![true, true]).unwrap();
        let n = v.normalize_b0(&scheme).unwrap();
        assert_eq!(n.voxel(0), &[1.0, 0.5]);
        assert!(!n.mask[1]);
        assert_eq!(n.voxel(1), &[0.0, 0.0]);
    }

    #[test]
    fn slab_extracts_slices() {
        let mut v = SignalVolume::zeros([2, 1, 3], 1);
        for i in 0..6 {
            v.data[i] = i as f64;
        }
        let s = v.slab(1, 3);
        assert_eq!(s.dims, [2, 1, 2]);
        assert_eq!(s.data, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_validation() {
        assert!(SignalVolume::new([2, 1, 1], 2, vec![0.0; 3], vec![true; 2]).is_err());
        assert!(SignalVolume::new([2, 1, 1], 2, vec![0.0; 4], vec![true; 1]).is_err());
        assert!(SignalVolume::new([0, 1, 1], 2, vec![], vec![]).is_err());
    }
}
