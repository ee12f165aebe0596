use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use fixelfit::config::RunConfig;
use fixelfit::phantom::{build_benchmark, PhantomSpec};
use fixelfit_ffi::*;

fn last_error() -> String {
    let p = ff_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_scheme() -> *mut FfScheme {
    let cfg = RunConfig { scheme: fixelfit::config::SchemeSpec { dirs_per_shell: 12, ..Default::default() }, ..Default::default() };
    let s = cfg.scheme.build().unwrap();
    let dirs: Vec<f64> = s.directions().iter().flatten().copied().collect();
    let mut out = ptr::null_mut();
    let st = unsafe { ff_scheme_new(s.b_values().as_ptr(), dirs.as_ptr(), s.len(), 50.0, &mut out) };
    assert_eq!(st, FfStatus::Ok);
    out
}

#[test]
fn log_i0_matches_core() {
    let mut v = 0.0;
    assert_eq!(unsafe { ff_log_i0(3.0, &mut v) }, FfStatus::Ok);
    assert!(ff_last_error().is_null());
    assert_eq!(v, fixelfit::special::log_i0(3.0).unwrap());
    assert_eq!(unsafe { ff_log_i0(-1.0, &mut v) }, FfStatus::Data);
    assert!(last_error().contains("x >= 0"));
    assert_eq!(unsafe { ff_log_i0(1.0, ptr::null_mut()) }, FfStatus::NullPointer);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ff_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn scheme_errors_and_len() {
    let s = small_scheme();
    assert_eq!(unsafe { ff_scheme_len(s) }, 37);
    unsafe { ff_scheme_free(s) };
    assert_eq!(unsafe { ff_scheme_len(ptr::null()) }, 0);

    let b = [0.0, 1000.0];
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ff_scheme_new(b.as_ptr(), ptr::null(), 2, 50.0, &mut out) }, FfStatus::NullPointer);
    assert!(out.is_null());
    let missing = CString::new("/nonexistent/x.bval").unwrap();
    assert_eq!(unsafe { ff_scheme_read(missing.as_ptr(), missing.as_ptr(), &mut out) }, FfStatus::Io);
}

#[test]
fn config_json_round_trip_and_rejection() {
    let json = CString::new(r#"{"fit": {"iterations": 7}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ff_config_from_json(json.as_ptr(), &mut cfg) }, FfStatus::Ok);
    let mut text = ptr::null_mut();
    assert_eq!(unsafe { ff_config_to_json(cfg, &mut text) }, FfStatus::Ok);
    let parsed = RunConfig::from_json(unsafe { CStr::from_ptr(text) }.to_str().unwrap()).unwrap();
    assert_eq!(parsed.fit.iterations, 7);
    unsafe {
        ff_string_free(text);
        ff_config_free(cfg);
    }

    let bad = CString::new(r#"{"fit": {"iteratoins": 7}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ff_config_from_json(bad.as_ptr(), &mut cfg) }, FfStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("iteratoins"));
}

#[test]
fn fit_through_handles() {
    let mut rc = RunConfig::default();
    rc.scheme.dirs_per_shell = 12;
    rc.fit.iterations = 40;
    let scheme = rc.scheme.build().unwrap();
    let spec = PhantomSpec { angles: vec![90.0], voxels_per_angle: 6, include_single_fiber: false, ..Default::default() };
    let (raw, _) = build_benchmark(&spec, &scheme).unwrap();

    let s = small_scheme();
    let json = CString::new(serde_json::to_string(&rc).unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ff_config_from_json(json.as_ptr(), &mut cfg) }, FfStatus::Ok);
    let mut fit = ptr::null_mut();
    let st = unsafe { ff_fit(s, cfg, raw.data.as_ptr(), raw.dims.as_ptr(), ptr::null(), &mut fit) };
    assert_eq!(st, FfStatus::Ok, "{}", last_error());

    let n_vox = raw.n_voxels();
    assert_eq!(unsafe { ff_fit_n_voxels(fit) }, n_vox);
    assert_eq!(unsafe { ff_fit_k(fit) }, 2);
    let len = unsafe { ff_fit_map_len(fit, FfMap::Fractions) };
    assert_eq!(len, n_vox * 5);
    let mut fr = vec![0.0; len];
    assert_eq!(unsafe { ff_fit_copy_map(fit, FfMap::Fractions, fr.as_mut_ptr(), len) }, FfStatus::Ok);
    for v in fr.chunks(5) {
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mut dirs = vec![0.0; n_vox * 6];
    assert_eq!(unsafe { ff_fit_copy_map(fit, FfMap::Directions, dirs.as_mut_ptr(), dirs.len()) }, FfStatus::Ok);
    for d in dirs.chunks(3) {
        assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(unsafe { ff_fit_map_len(fit, FfMap::Alpha) }, 37);
    assert_eq!(unsafe { ff_fit_map_len(fit, FfMap::BiasGrid) }, 512);
    let mut short = vec![0.0; 3];
    assert_eq!(unsafe { ff_fit_copy_map(fit, FfMap::S0, short.as_mut_ptr(), 3) }, FfStatus::BufferSize);

    let mut sigma = 0.0;
    assert_eq!(unsafe { ff_fit_sigma(fit, &mut sigma) }, FfStatus::Ok);
    assert!(sigma > 0.0);
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { ff_fit_report_json(fit, &mut report) }, FfStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(report) }.to_str().unwrap()).unwrap();
    assert_eq!(v["slabs"].as_array().unwrap().len(), 1);
    unsafe {
        ff_string_free(report);
        ff_fit_free(fit);
    }

    let empty_mask = vec![0u8; n_vox];
    let mut fit = ptr::null_mut();
    let st = unsafe { ff_fit(s, cfg, raw.data.as_ptr(), raw.dims.as_ptr(), empty_mask.as_ptr(), &mut fit) };
    assert_ne!(st, FfStatus::Ok);
    assert!(fit.is_null());
    unsafe {
        ff_config_free(cfg);
        ff_scheme_free(s);
    }
}

#[test]
fn check_grad_through_c_api() {
    let json = CString::new(r#"{"scheme": {"dirs_per_shell": 8}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ff_config_from_json(json.as_ptr(), &mut cfg) }, FfStatus::Ok);
    let (mut max, mut probes) = (f64::NAN, 0usize);
    assert_eq!(unsafe { ff_check_grad(cfg, 4, 3, &mut max, &mut probes) }, FfStatus::Ok);
    assert!(max < 1e-3);
    assert_eq!(probes, 2 * 7 * 4 + 4);
    unsafe { ff_config_free(cfg) };
}

#[test]
fn simulate_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let json = CString::new(r#"{"phantom": {"angles": [90], "voxels_per_angle": 3}, "scheme": {"dirs_per_shell": 8}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ff_config_from_json(json.as_ptr(), &mut cfg) }, FfStatus::Ok);
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ff_simulate(cfg, out.as_ptr()) }, FfStatus::Ok);
    assert!(dir.path().join("dwi.nii").exists());
    assert!(dir.path().join("truth.json").exists());
    assert_eq!(unsafe { ff_simulate(ptr::null(), out.as_ptr()) }, FfStatus::NullPointer);
    unsafe { ff_config_free(cfg) };
}

/// The generated header parses as C99 and C++ and declares every exported
/// function.
#[test]
fn header_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/fixelfit.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "ff_last_error", "ff_version", "ff_string_free", "ff_log_i0", "ff_scheme_new", "ff_scheme_read", "ff_scheme_len",
        "ff_scheme_free", "ff_config_default", "ff_config_from_json", "ff_config_to_json", "ff_config_free", "ff_fit",
        "ff_fit_k", "ff_fit_n_voxels", "ff_fit_sigma", "ff_fit_map_len", "ff_fit_copy_map", "ff_fit_report_json",
        "ff_fit_free", "ff_simulate", "ff_check_grad",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"fixelfit.h\"\nint main(void) {\n  double v;\n  FfStatus s = ff_log_i0(1.0, &v);\n  FfScheme *sc = NULL;\n  ff_scheme_free(sc);\n  return s == FF_STATUS_OK ? (int)ff_fit_map_len(NULL, FF_MAP_S0) : 1;\n}\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    for (compiler, std) in [("cc", "-std=c99"), ("c++", "-std=c++11")] {
        let mut cmd = Command::new(compiler);
        cmd.args([std, "-Wall", "-Werror", "-fsyntax-only", "-I", include]);
        if compiler == "c++" {
            cmd.args(["-x", "c++"]);
        }
        match cmd.arg(&src).output() {
            Ok(out) => assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr)),
            Err(e) => eprintln!("skipping {compiler}: {e}"),
        }
    }
}
