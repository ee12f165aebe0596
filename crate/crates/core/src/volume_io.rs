//! Single-file NIfTI-1 volumes, FSL gradient tables, ground-truth sidecars
//! and fitted parameter maps.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::acquisition::{load_scheme, AcquisitionScheme};
use crate::error::{Error, Result};
use crate::model::{upsample_bias, CalibrationParams, ConstrainedField, BIAS_GRID_LEN};
use crate::phantom::GroundTruth;
use crate::volume::SignalVolume;

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// A 4D scalar grid, x fastest, then y, z and t.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 4],
    /// Voxel size in mm.
    pub voxel_size: [f32; 3],
    pub data: Vec<f32>,
    /// Stored in the sform rows and copied through; never interpreted.
    pub affine: Option<[[f32; 4]; 3]>,
}

impl Volume {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(Error::InvalidInput(format!("volume dims {dims:?} out of range")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::DataMismatch(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, voxel_size: [1.0; 3], data, affine: None })
    }

    pub fn n_spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Volume `t` as a contiguous slice.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.n_spatial();
        &self.data[t * n..(t + 1) * n]
    }

    /// Rearranges voxel-major signal data into frames.
    pub fn from_signal(signal: &SignalVolume) -> Result<Self> {
        let n_vox = signal.n_voxels();
        let mut data = vec![0.0f32; n_vox * signal.n_meas];
        for v in 0..n_vox {
            for (n, &s) in signal.voxel(v).iter().enumerate() {
                data[n * n_vox + v] = s as f32;
            }
        }
        let d = signal.dims;
        Volume::new([d[0], d[1], d[2], signal.n_meas], data)
    }

    /// Voxel-major signal volume with the given mask (all voxels when `None`).
    pub fn to_signal(&self, mask: Option<Vec<bool>>) -> Result<SignalVolume> {
        let n_vox = self.n_spatial();
        let nt = self.dims[3];
        let mut data = vec![0.0; n_vox * nt];
        for t in 0..nt {
            for (v, &x) in self.frame(t).iter().enumerate() {
                data[v * nt + t] = x as f64;
            }
        }
        let mask = mask.unwrap_or_else(|| vec![true; n_vox]);
        SignalVolume::new([self.dims[0], self.dims[1], self.dims[2]], nt, data, mask)
    }

    /// Nonzero voxels of the first frame.
    pub fn to_mask(&self) -> Vec<bool> {
        self.frame(0).iter().map(|&x| x != 0.0).collect()
    }
}

fn header_field<B: ByteOrder>(h: &[u8]) -> (i16, [i16; 8]) {
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&h[40 + 2 * i..]);
    }
    (B::read_i16(&h[70..]), dim)
}

fn parse<B: ByteOrder>(bytes: &[u8], path: &Path) -> Result<Volume> {
    let h = &bytes[..HEADER_LEN];
    if B::read_i32(&h[0..]) != HEADER_LEN as i32 {
        return Err(Error::UnsupportedFormat(format!("{}: sizeof_hdr is not 348", path.display())));
    }
    let (datatype, dim) = header_field::<B>(h);
    let ndim = dim[0] as usize;
    let mut dims = [1usize; 4];
    for i in 0..ndim.min(4) {
        if dim[i + 1] < 1 {
            return Err(Error::UnsupportedFormat(format!("{}: dim[{}] = {}", path.display(), i + 1, dim[i + 1])));
        }
        dims[i] = dim[i + 1] as usize;
    }
    if (5..=ndim).any(|i| dim[i] > 1) {
        return Err(Error::UnsupportedFormat(format!("{}: more than four dimensions", path.display())));
    }
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::UnsupportedFormat(format!("{}: datatype {other}", path.display())));
        }
    };
    let offset = B::read_f32(&h[108..]);
    if !(offset >= HEADER_LEN as f32) {
        return Err(Error::UnsupportedFormat(format!("{}: vox_offset {offset}", path.display())));
    }
    let offset = offset as usize;
    let slope = B::read_f32(&h[112..]);
    let inter = B::read_f32(&h[116..]);
    let n: usize = dims.iter().product();
    let expected = offset + n * width;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let raw = &bytes[offset..expected];
    let mut data: Vec<f32> = match datatype {
        DT_INT16 => raw.chunks_exact(2).map(|c| B::read_i16(c) as f32).collect(),
        DT_FLOAT32 => raw.chunks_exact(4).map(B::read_f32).collect(),
        _ => raw.chunks_exact(8).map(|c| B::read_f64(c) as f32).collect(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|x| *x = *x * slope + inter);
    }
    let mut voxel_size = [1.0f32; 3];
    for (i, v) in voxel_size.iter_mut().enumerate() {
        *v = B::read_f32(&h[80 + 4 * i..]);
    }
    let affine = (B::read_i16(&h[254..]) > 0).then(|| {
        let mut a = [[0.0f32; 4]; 3];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, x) in row.iter_mut().enumerate() {
                *x = B::read_f32(&h[280 + 16 * r + 4 * c..]);
            }
        }
        a
    });
    Ok(Volume { dims, voxel_size, data, affine })
}

/// Decodes a single-file NIfTI-1 image held in memory.
pub fn decode_nifti(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: detached header/image pairs are not supported",
                path.display()
            )))
        }
        _ => return Err(Error::UnsupportedFormat(format!("{}: bad magic", path.display()))),
    }
    let dim0 = LittleEndian::read_i16(&bytes[40..]);
    if (1..=7).contains(&dim0) {
        parse::<LittleEndian>(bytes, path)
    } else {
        parse::<BigEndian>(bytes, path)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes, path)
}

/// Encodes as little-endian float32 with the data at byte 352.
pub fn encode_nifti(volume: &Volume) -> Vec<u8> {
    type B = LittleEndian;
    let mut out = vec![0u8; VOX_OFFSET + 4 * volume.data.len()];
    let h = &mut out[..];
    B::write_i32(&mut h[0..], HEADER_LEN as i32);
    h[38] = b'r';
    let ndim = if volume.dims[3] > 1 { 4 } else { 3 };
    B::write_i16(&mut h[40..], ndim);
    for i in 0..4 {
        B::write_i16(&mut h[42 + 2 * i..], volume.dims[i] as i16);
    }
    for i in 4..7 {
        B::write_i16(&mut h[42 + 2 * i..], 1);
    }
    B::write_i16(&mut h[70..], DT_FLOAT32);
    B::write_i16(&mut h[72..], 32);
    B::write_f32(&mut h[76..], 1.0);
    for i in 0..3 {
        B::write_f32(&mut h[80 + 4 * i..], volume.voxel_size[i]);
    }
    B::write_f32(&mut h[92..], 1.0);
    B::write_f32(&mut h[108..], VOX_OFFSET as f32);
    B::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    if let Some(a) = volume.affine {
        B::write_i16(&mut h[254..], 1);
        for (r, row) in a.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                B::write_f32(&mut h[280 + 16 * r + 4 * c..], x);
            }
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    for (i, &x) in volume.data.iter().enumerate() {
        B::write_f32(&mut out[VOX_OFFSET + 4 * i..], x);
    }
    out
}

pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_nifti(volume)).map_err(|e| Error::io(path, e))
}

/// Rewrites a float32 NIfTI-1 file in the opposite byte order.
pub fn byte_swap_nifti(bytes: &[u8]) -> Result<Vec<u8>> {
    let vol = decode_nifti(bytes, Path::new("<memory>"))?;
    let little = (1..=7).contains(&LittleEndian::read_i16(&bytes[40..]));
    let (datatype, offset) = if little {
        (LittleEndian::read_i16(&bytes[70..]), LittleEndian::read_f32(&bytes[108..]))
    } else {
        (BigEndian::read_i16(&bytes[70..]), BigEndian::read_f32(&bytes[108..]))
    };
    if datatype != DT_FLOAT32 {
        return Err(Error::UnsupportedFormat("byte swapping supports float32 only".into()));
    }
    let mut out = bytes.to_vec();
    let swap = |out: &mut [u8], at: usize, width: usize| out[at..at + width].reverse();
    swap(&mut out, 0, 4);
    for i in 0..8 {
        swap(&mut out, 40 + 2 * i, 2);
    }
    for at in [56, 60, 64] {
        swap(&mut out, at, 4);
    }
    for at in [68, 70, 72, 74, 120, 252, 254] {
        swap(&mut out, at, 2);
    }
    for i in 0..8 {
        swap(&mut out, 76 + 4 * i, 4);
    }
    for at in [108, 112, 116, 124, 128, 132, 136, 140, 144] {
        swap(&mut out, at, 4);
    }
    for i in 0..18 {
        swap(&mut out, 256 + 4 * i, 4);
    }
    let offset = offset as usize;
    for i in 0..vol.data.len() {
        swap(&mut out, offset + 4 * i, 4);
    }
    Ok(out)
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_scheme(bval: impl AsRef<Path>, bvec: impl AsRef<Path>) -> Result<AcquisitionScheme> {
    load_scheme(&read_text(bval)?, &read_text(bvec)?)
}

pub fn write_scheme(scheme: &AcquisitionScheme, bval: impl AsRef<Path>, bvec: impl AsRef<Path>) -> Result<()> {
    let (b, v) = scheme.to_fsl();
    write_text(bval, &b)?;
    write_text(bvec, &v)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    read_json(path)
}

pub fn write_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    write_json(truth, path)
}

/// Calibration parameters as stored next to the parameter maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub sigma_log: f64,
    pub bias_grid: Vec<f64>,
}

impl From<&CalibrationParams> for CalibrationFile {
    fn from(c: &CalibrationParams) -> Self {
        Self {
            alpha: c.alpha.clone(),
            beta: c.beta.clone(),
            sigma: c.sigma(),
            sigma_log: c.sigma_log,
            bias_grid: c.bias_grid.clone(),
        }
    }
}

impl CalibrationFile {
    pub fn to_params(&self) -> Result<CalibrationParams> {
        if self.bias_grid.len() != BIAS_GRID_LEN || self.alpha.len() != self.beta.len() {
            return Err(Error::DataMismatch("calibration file has inconsistent lengths".into()));
        }
        Ok(CalibrationParams {
            bias_grid: self.bias_grid.clone(),
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            sigma_log: self.sigma_log,
        })
    }
}

pub const FRACTIONS_FILE: &str = "fractions.nii";
pub const S0_FILE: &str = "s0.nii";
pub const F_INTRA_FILE: &str = "f_intra.nii";
pub const BIAS_FILE: &str = "bias_field.nii";
pub const MASK_FILE: &str = "mask.nii";
pub const CALIBRATION_FILE: &str = "calibration.json";

pub fn dir_file(fiber: usize) -> String {
    format!("dir_{}.nii", fiber + 1)
}

fn frames(dims: [usize; 3], nt: usize, value: impl Fn(usize, usize) -> f64) -> Result<Volume> {
    let n = dims[0] * dims[1] * dims[2];
    let mut data = vec![0.0f32; n * nt];
    for t in 0..nt {
        for v in 0..n {
            data[t * n + v] = value(v, t) as f32;
        }
    }
    Volume::new([dims[0], dims[1], dims[2], nt], data)
}

/// Writes fraction, S0, f_intra, per-fiber direction, bias and mask maps
/// plus `calibration.json`. Returns the written paths.
pub fn write_param_maps(
    field: &ConstrainedField,
    cal: &CalibrationParams,
    dims: [usize; 3],
    mask: &[bool],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_vox = dims[0] * dims[1] * dims[2];
    if field.n_voxels() != n_vox || mask.len() != n_vox {
        return Err(Error::DataMismatch("parameter field does not match the volume".into()));
    }
    let nf = field.n_fractions();
    let mut written = Vec::new();
    let mut put = |name: String, vol: Volume| -> Result<()> {
        let p = dir.join(name);
        write_nifti(&vol, &p)?;
        written.push(p);
        Ok(())
    };
    put(FRACTIONS_FILE.into(), frames(dims, nf, |v, t| field.fractions(v)[t])?)?;
    put(S0_FILE.into(), frames(dims, 1, |v, _| field.s0[v])?)?;
    put(F_INTRA_FILE.into(), frames(dims, 1, |v, _| field.f_intra[v])?)?;
    for j in 0..field.k {
        put(dir_file(j), frames(dims, 3, |v, t| field.dirs(v)[j][t])?)?;
    }
    let bias = upsample_bias(&cal.bias_grid, dims);
    put(BIAS_FILE.into(), frames(dims, 1, |v, _| bias[v])?)?;
    put(MASK_FILE.into(), frames(dims, 1, |v, _| mask[v] as u8 as f64)?)?;
    let cal_path = dir.join(CALIBRATION_FILE);
    write_json(&CalibrationFile::from(cal), &cal_path)?;
    written.push(cal_path);
    Ok(written)
}

/// Fitted maps read back from a directory written by [`write_param_maps`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMaps {
    pub dims: [usize; 3],
    pub field: ConstrainedField,
    pub cal: CalibrationParams,
    pub mask: Vec<bool>,
}

pub fn read_param_maps(dir: impl AsRef<Path>) -> Result<ParamMaps> {
    let dir = dir.as_ref();
    let fractions = read_nifti(dir.join(FRACTIONS_FILE))?;
    let d = fractions.dims;
    let dims = [d[0], d[1], d[2]];
    let n = fractions.n_spatial();
    let nf = d[3];
    if nf < 4 {
        return Err(Error::DataMismatch(format!("fraction map has {nf} channels, need at least 4")));
    }
    let k = nf - 3;
    let scalar = |name: &str| -> Result<Vec<f64>> {
        let v = read_nifti(dir.join(name))?;
        if v.dims != [d[0], d[1], d[2], 1] {
            return Err(Error::DataMismatch(format!("{name} has dims {:?}", v.dims)));
        }
        Ok(v.data.iter().map(|&x| x as f64).collect())
    };
    let mut frac = vec![0.0; n * nf];
    for t in 0..nf {
        for (v, &x) in fractions.frame(t).iter().enumerate() {
            frac[v * nf + t] = x as f64;
        }
    }
    let mut dirs = vec![[0.0; 3]; n * k];
    for j in 0..k {
        let name = dir_file(j);
        let vol = read_nifti(dir.join(&name))?;
        if vol.dims != [d[0], d[1], d[2], 3] {
            return Err(Error::DataMismatch(format!("{name} has dims {:?}", vol.dims)));
        }
        for t in 0..3 {
            for (v, &x) in vol.frame(t).iter().enumerate() {
                dirs[v * k + j][t] = x as f64;
            }
        }
    }
    let mask = scalar(MASK_FILE)?.iter().map(|&x| x != 0.0).collect();
    let field = ConstrainedField { k, s0: scalar(S0_FILE)?, fractions: frac, dirs, f_intra: scalar(F_INTRA_FILE)? };
    let cal = read_json::<CalibrationFile>(dir.join(CALIBRATION_FILE))?.to_params()?;
    Ok(ParamMaps { dims, field, cal, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        Volume::new([2, 2, 2, 1], (0..8).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        let mut vol = sample();
        vol.affine = Some([[2.0, 0.0, 0.0, -10.0], [0.0, 2.0, 0.0, 5.0], [0.0, 0.0, 2.0, 1.0]]);
        vol.voxel_size = [2.0, 2.0, 2.5];
        write_nifti(&vol, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 352 + 32);
        let back = read_nifti(&p).unwrap();
        assert_eq!(back, vol);
        let bytes = fs::read(&p).unwrap();
        for i in 0..4 {
            assert_eq!(LittleEndian::read_i16(&bytes[42 + 2 * i..]), [2, 2, 2, 1][i]);
        }
        assert_eq!(&bytes[344..348], b"n+1\0");
    }

    #[test]
    fn rejects_detached_and_truncated() {
        let mut bytes = encode_nifti(&sample());
        bytes[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode_nifti(&bytes, Path::new("x")), Err(Error::UnsupportedFormat(_))));
        let bytes = encode_nifti(&sample());
        assert!(matches!(
            decode_nifti(&bytes[..bytes.len() - 1], Path::new("x")),
            Err(Error::Truncated { expected: 384, found: 383 })
        ));
        let mut bytes = encode_nifti(&sample());
        LittleEndian::write_i16(&mut bytes[70..], 2);
        assert!(matches!(decode_nifti(&bytes, Path::new("x")), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn int16_with_scaling() {
        let mut bytes = encode_nifti(&Volume::new([1, 1, 1, 1], vec![0.0]).unwrap());
        bytes.truncate(VOX_OFFSET);
        LittleEndian::write_i16(&mut bytes[70..], DT_INT16);
        LittleEndian::write_i16(&mut bytes[72..], 16);
        LittleEndian::write_f32(&mut bytes[112..], 2.0);
        LittleEndian::write_f32(&mut bytes[116..], 1.0);
        bytes.extend_from_slice(&3i16.to_le_bytes());
        let vol = decode_nifti(&bytes, Path::new("x")).unwrap();
        assert_eq!(vol.data, vec![7.0]);
    }

    #[test]
    fn float64_and_vox_offset() {
        let mut bytes = encode_nifti(&Volume::new([2, 1, 1, 1], vec![0.0, 0.0]).unwrap());
        bytes.truncate(VOX_OFFSET);
        bytes.extend_from_slice(&[0u8; 8]);
        LittleEndian::write_f32(&mut bytes[108..], 360.0);
        LittleEndian::write_i16(&mut bytes[70..], DT_FLOAT64);
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&(-2.25f64).to_le_bytes());
        let vol = decode_nifti(&bytes, Path::new("x")).unwrap();
        assert_eq!(vol.data, vec![1.5, -2.25]);
    }

    #[test]
    fn big_endian_copy_parses_identically() {
        let mut vol = Volume::new([3, 2, 1, 2], (0..12).map(|i| i as f32 / 3.0).collect()).unwrap();
        vol.affine = Some([[1.0, 0.5, 0.0, 3.0], [0.0, 1.0, 0.0, 4.0], [0.0, 0.0, 1.0, 5.0]]);
        let le = encode_nifti(&vol);
        let be = byte_swap_nifti(&le).unwrap();
        assert_ne!(le, be);
        assert_eq!(decode_nifti(&be, Path::new("x")).unwrap(), vol);
    }

    #[test]
    fn signal_layout_round_trip() {
        let sig = SignalVolume::new([2, 1, 1], 3, vec![1.0, 0.5, 0.25, 2.0, 1.0, 0.75], vec![true, true]).unwrap();
        let vol = Volume::from_signal(&sig).unwrap();
        assert_eq!(vol.dims, [2, 1, 1, 3]);
        assert_eq!(vol.frame(1), &[0.5, 1.0]);
        assert_eq!(vol.to_signal(None).unwrap(), sig);
    }

    #[test]
    fn param_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = 2;
        let n = 3;
        let field = ConstrainedField {
            k,
            s0: vec![1.0, 0.5, 0.25],
            fractions: (0..n * (k + 3)).map(|i| (i % 5) as f64 * 0.125).collect(),
            dirs: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5], [1.0, 0.0, 0.0]],
            f_intra: vec![0.5, 0.25, 0.75],
        };
        let mut cal = CalibrationParams::identity(4, 0.05);
        cal.alpha[1] = 0.125;
        let mask = vec![true, false, true];
        let files = write_param_maps(&field, &cal, [3, 1, 1], &mask, dir.path()).unwrap();
        assert!(files.iter().any(|p| p.ends_with("dir_2.nii")));
        assert_eq!(read_nifti(dir.path().join(FRACTIONS_FILE)).unwrap().dims[3], 5);
        assert!(read_nifti(dir.path().join(BIAS_FILE)).unwrap().data.iter().all(|&b| b == 1.0));
        let back = read_param_maps(dir.path()).unwrap();
        assert_eq!(back.field, field);
        assert_eq!(back.cal, cal);
        assert_eq!(back.mask, mask);
    }
}
