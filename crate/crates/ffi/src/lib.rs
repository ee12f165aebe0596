//! C ABI for `fixelfit`.
//!
//! Every fallible function returns an [`FfStatus`]; on failure a message is
//! kept per thread and can be read with [`ff_last_error`]. Objects cross the
//! boundary as opaque handles that must be released with their `_free`
//! function. Strings returned by the library are freed with
//! [`ff_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fixelfit::config::RunConfig;
use fixelfit::optimizer::{fit_volume, VolumeFit};
use fixelfit::pipeline::{cmd_check_grad, cmd_simulate, CheckGradOptions};
use fixelfit::volume_io::read_scheme;
use fixelfit::{AcquisitionScheme, Error, SignalVolume};

/// Status codes. Values 2, 3 and 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    Config = 2,
    /// Invalid input data, file or shape mismatch.
    Data = 3,
    /// Divergence, lack of progress or a non-finite value.
    Numeric = 4,
    Io = 5,
    /// A string argument was not valid UTF-8.
    Utf8 = 6,
    /// An output buffer has the wrong length.
    BufferSize = 7,
    Panic = 8,
}

/// Per-voxel maps that can be copied out of a fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfMap {
    /// `n_voxels` values.
    S0 = 0,
    /// `n_voxels * (k + 3)` values ordered CSF, GM, WM1..K, restricted.
    Fractions = 1,
    /// `n_voxels * k * 3` unit vectors.
    Directions = 2,
    /// `n_voxels` values.
    FIntra = 3,
    /// `n_voxels` values, 1 inside the mask and 0 outside.
    Mask = 4,
    /// Per-measurement log-scale, `n_measurements` values.
    Alpha = 5,
    /// Per-measurement offset, `n_measurements` values.
    Beta = 6,
    /// 8x8x8 log-domain bias control points.
    BiasGrid = 7,
}

/// Opaque gradient table.
pub struct FfScheme(AcquisitionScheme);

/// Opaque run configuration.
pub struct FfConfig(RunConfig);

/// Opaque fit result.
pub struct FfFit(VolumeFit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FfStatus {
    match err {
        Error::Io { .. } => FfStatus::Io,
        _ => match err.exit_code() {
            2 => FfStatus::Config,
            4 => FfStatus::Numeric,
            _ => FfStatus::Data,
        },
    }
}

fn fail(status: FfStatus, msg: impl Into<String>) -> FfStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, recording errors and panics.
fn guard(f: impl FnOnce() -> Result<(), FfStatus>) -> FfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FfStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(FfStatus::Panic, msg)
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, FfStatus>;
}

impl<T> OrStatus<T> for fixelfit::Result<T> {
    fn or_status(self) -> Result<T, FfStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, FfStatus> {
    p.as_ref().ok_or_else(|| fail(FfStatus::NullPointer, format!("{name} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, FfStatus> {
    if p.is_null() {
        return Err(fail(FfStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(FfStatus::Utf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], FfStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(FfStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T, name: &str) -> Result<(), FfStatus> {
    if out.is_null() {
        return Err(fail(FfStatus::NullPointer, format!("{name} is null")));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `ln I0(x)` for `x >= 0`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_log_i0(x: f64, out: *mut f64) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        *out = fixelfit::special::log_i0(x).or_status()?;
        Ok(())
    })
}

/// Builds a gradient table from `n` b-values and `n` row-major direction
/// triples. Entries with b below `b0_threshold` are treated as b0.
///
/// # Safety
/// `b_values` must hold `n` values, `directions` `3 * n`, and `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_scheme_new(
    b_values: *const f64,
    directions: *const f64,
    n: usize,
    b0_threshold: f64,
    out: *mut *mut FfScheme,
) -> FfStatus {
    guard(|| {
        let b = slice(b_values, n, "b_values")?.to_vec();
        let d = slice(directions, 3 * n, "directions")?;
        let dirs = d.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let scheme = AcquisitionScheme::new(b, dirs, b0_threshold).or_status()?;
        put(out, FfScheme(scheme), "out")
    })
}

/// Reads an FSL-style `.bval` / `.bvec` pair.
///
/// # Safety
/// Paths must be nul-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_scheme_read(bval_path: *const c_char, bvec_path: *const c_char, out: *mut *mut FfScheme) -> FfStatus {
    guard(|| {
        let scheme = read_scheme(c_str(bval_path, "bval_path")?, c_str(bvec_path, "bvec_path")?).or_status()?;
        put(out, FfScheme(scheme), "out")
    })
}

/// Number of measurements, or 0 for a null handle.
///
/// # Safety
/// `scheme` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ff_scheme_len(scheme: *const FfScheme) -> usize {
    scheme.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `scheme` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ff_scheme_free(scheme: *mut FfScheme) {
    if !scheme.is_null() {
        drop(Box::from_raw(scheme));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_config_default(out: *mut *mut FfConfig) -> FfStatus {
    guard(|| put(out, FfConfig(RunConfig::default()), "out"))
}

/// Parses a JSON configuration; missing fields take defaults and unknown
/// keys are rejected.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_config_from_json(json: *const c_char, out: *mut *mut FfConfig) -> FfStatus {
    guard(|| {
        let cfg = RunConfig::from_json(c_str(json, "json")?).or_status()?;
        put(out, FfConfig(cfg), "out")
    })
}

/// Fully resolved configuration as JSON. Free with [`ff_string_free`].
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_config_to_json(config: *const FfConfig, out: *mut *mut c_char) -> FfStatus {
    guard(|| {
        let cfg = non_null(config, "config")?;
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        *out = into_c_string(serde_json::to_string_pretty(&cfg.0).expect("config serializes"));
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ff_config_free(config: *mut FfConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Fits raw (not b0-normalized) signals.
///
/// `data` holds `dims[0] * dims[1] * dims[2]` voxels with x fastest, each
/// with `ff_scheme_len(scheme)` contiguous measurements. `mask` is null (all
/// voxels) or one byte per voxel, nonzero meaning inside.
///
/// # Safety
/// Buffers must have the sizes above; handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ff_fit(
    scheme: *const FfScheme,
    config: *const FfConfig,
    data: *const f64,
    dims: *const usize,
    mask: *const u8,
    out: *mut *mut FfFit,
) -> FfStatus {
    guard(|| {
        let scheme = &non_null(scheme, "scheme")?.0;
        let cfg = &non_null(config, "config")?.0;
        cfg.validate().or_status()?;
        let d = slice(dims, 3, "dims")?;
        let dims = [d[0], d[1], d[2]];
        let n_vox = dims.iter().product::<usize>();
        let values = slice(data, n_vox * scheme.len(), "data")?.to_vec();
        let mask = if mask.is_null() {
            vec![true; n_vox]
        } else {
            slice(mask, n_vox, "mask")?.iter().map(|&m| m != 0).collect()
        };
        let raw = SignalVolume::new(dims, scheme.len(), values, mask).or_status()?;
        let normalized = raw.normalize_b0(scheme).or_status()?;
        let fit = fit_volume(&normalized, scheme, &cfg.fit).or_status()?;
        put(out, FfFit(fit), "out")
    })
}

/// Fiber slots per voxel, or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ff_fit_k(fit: *const FfFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.field.k)
}

/// Voxel count, or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ff_fit_n_voxels(fit: *const FfFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.field.n_voxels())
}

/// Fitted noise level.
///
/// # Safety
/// `fit` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_fit_sigma(fit: *const FfFit, out: *mut f64) -> FfStatus {
    guard(|| {
        let f = non_null(fit, "fit")?;
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        *out = f.0.cal.sigma();
        Ok(())
    })
}

fn map_values(fit: &VolumeFit, map: FfMap) -> Vec<f64> {
    let f = &fit.field;
    match map {
        FfMap::S0 => f.s0.clone(),
        FfMap::Fractions => f.fractions.clone(),
        FfMap::Directions => f.dirs.iter().flatten().copied().collect(),
        FfMap::FIntra => f.f_intra.clone(),
        FfMap::Mask => fit.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        FfMap::Alpha => fit.cal.alpha.clone(),
        FfMap::Beta => fit.cal.beta.clone(),
        FfMap::BiasGrid => fit.cal.bias_grid.clone(),
    }
}

/// Number of values in `map`, or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ff_fit_map_len(fit: *const FfFit, map: FfMap) -> usize {
    fit.as_ref().map_or(0, |f| map_values(&f.0, map).len())
}

/// Copies `map` into `out`, whose length `len` must equal
/// [`ff_fit_map_len`].
///
/// # Safety
/// `fit` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ff_fit_copy_map(fit: *const FfFit, map: FfMap, out: *mut f64, len: usize) -> FfStatus {
    guard(|| {
        let values = map_values(&non_null(fit, "fit")?.0, map);
        if values.len() != len {
            return Err(fail(FfStatus::BufferSize, format!("{map:?} has {} values, buffer holds {len}", values.len())));
        }
        if len > 0 {
            if out.is_null() {
                return Err(fail(FfStatus::NullPointer, "out is null"));
            }
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(&values);
        }
        Ok(())
    })
}

/// Per-slab loss traces and timings as JSON. Free with [`ff_string_free`].
///
/// # Safety
/// `fit` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_fit_report_json(fit: *const FfFit, out: *mut *mut c_char) -> FfStatus {
    guard(|| {
        let f = &non_null(fit, "fit")?.0;
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        let report = serde_json::json!({
            "dims": f.dims,
            "k": f.field.k,
            "sigma": f.cal.sigma(),
            "calibration_pass": f.calibration_pass,
            "slabs": f.slabs,
        });
        *out = into_c_string(report.to_string());
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ff_fit_free(fit: *mut FfFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Writes the synthetic benchmark dataset described by `config` into
/// `out_dir`.
///
/// # Safety
/// `config` must be a live handle and `out_dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ff_simulate(config: *const FfConfig, out_dir: *const c_char) -> FfStatus {
    guard(|| {
        let cfg = &non_null(config, "config")?.0;
        cmd_simulate(cfg, c_str(out_dir, "out_dir")?).or_status()?;
        Ok(())
    })
}

/// Finite-difference gradient check in both data modes with `probes` probes
/// per parameter group. Stores the largest relative discrepancy in
/// `max_discrepancy` and the total probe count in `total_probes` (either may
/// be null).
///
/// # Safety
/// `config` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn ff_check_grad(
    config: *const FfConfig,
    probes: usize,
    seed: u64,
    max_discrepancy: *mut f64,
    total_probes: *mut usize,
) -> FfStatus {
    guard(|| {
        let cfg = &non_null(config, "config")?.0;
        let opts = CheckGradOptions { probes, seed, ..Default::default() };
        let results = cmd_check_grad(cfg, &opts).or_status()?;
        if let Some(m) = max_discrepancy.as_mut() {
            *m = results.iter().map(|r| r.report.max_discrepancy()).fold(0.0, f64::max);
        }
        if let Some(t) = total_probes.as_mut() {
            *t = results.iter().map(|r| r.report.total_probes()).sum();
        }
        Ok(())
    })
}
