//! Run configuration: every setting a command uses, loadable from JSON with
//! all fields optional and unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::{synthetic_scheme, AcquisitionScheme, DEFAULT_B0_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_ANGLE_TOL, DEFAULT_F_DETECT};
use crate::optimizer::FitConfig;
use crate::phantom::PhantomSpec;
use crate::volume_io::{read_json, write_json};

/// Gradient table generated for simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSpec {
    pub shells: Vec<f64>,
    pub dirs_per_shell: usize,
    pub n_b0: usize,
    pub seed: u64,
    pub b0_threshold: f64,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        Self { shells: vec![1000.0, 2000.0, 3000.0], dirs_per_shell: 64, n_b0: 1, seed: 0, b0_threshold: DEFAULT_B0_THRESHOLD }
    }
}

impl SchemeSpec {
    pub fn build(&self) -> Result<AcquisitionScheme> {
        let scheme = synthetic_scheme(&self.shells, self.dirs_per_shell, self.n_b0, self.seed)?;
        AcquisitionScheme::new(scheme.b_values().to_vec(), scheme.directions().to_vec(), self.b0_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    /// Minimum WM fiber fraction for a fiber to count as a peak.
    pub f_detect: f64,
    /// Matching tolerance in degrees.
    pub angle_tol: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { f_detect: DEFAULT_F_DETECT, angle_tol: DEFAULT_ANGLE_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSettings {
    /// Voxels per crossing angle for the reduced-scale run.
    pub voxels_per_angle: usize,
    /// Voxels per crossing angle with `--full`.
    pub full_voxels_per_angle: usize,
    pub gain_sigmas: Vec<f64>,
    pub gain_angles: Vec<f64>,
    pub gain_voxels_per_angle: usize,
    /// Size of the 3-fiber patch used for the optimizer comparison.
    pub optimizer_voxels: usize,
    pub optimizer_iterations: usize,
    pub adam_lr: f64,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            voxels_per_angle: 50,
            full_voxels_per_angle: 200,
            gain_sigmas: vec![0.02, 0.05, 0.1, 0.2],
            gain_angles: vec![30.0, 45.0, 60.0, 90.0],
            gain_voxels_per_angle: 200,
            optimizer_voxels: 2000,
            optimizer_iterations: 200,
            adam_lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub phantom: PhantomSpec,
    pub scheme: SchemeSpec,
    pub metrics: MetricSettings,
    pub benchmark: BenchmarkSettings,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
}


impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: RunConfig = read_json(path).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.phantom.validate()?;
        if self.scheme.shells.is_empty() || self.scheme.dirs_per_shell < 6 {
            return Err(Error::Config("scheme needs at least one shell and 6 directions per shell".into()));
        }
        let m = self.metrics;
        if !(m.f_detect > 0.0 && m.f_detect < 1.0) {
            return Err(Error::Config("f_detect must be in (0, 1)".into()));
        }
        if !(m.angle_tol > 0.0 && m.angle_tol <= 90.0) {
            return Err(Error::Config("angle_tol must be in (0, 90]".into()));
        }
        let b = &self.benchmark;
        if b.voxels_per_angle == 0 || b.full_voxels_per_angle == 0 || b.gain_voxels_per_angle == 0 {
            return Err(Error::Config("benchmark voxel counts must be positive".into()));
        }
        if b.gain_sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("gain sigmas must be non-negative".into()));
        }
        if !(b.adam_lr > 0.0) || b.optimizer_voxels == 0 || b.optimizer_iterations == 0 {
            return Err(Error::Config("optimizer comparison settings must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.phantom.n_voxels(), 3400);
        assert_eq!(cfg.scheme.build().unwrap().len(), 193);
    }

    #[test]
    fn partial_override() {
        let cfg = RunConfig::from_json(r#"{"fit": {"weights": {"lambda_rep": 0.02}}, "phantom": {"snr": 10}}"#).unwrap();
        assert_eq!(cfg.fit.weights.lambda_rep, 0.02);
        assert_eq!(cfg.fit.weights.lambda_sp, 0.01);
        assert_eq!(cfg.phantom.snr, 10.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"fit": {"weights": {"lambda_rp": 0.02}}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"fitt": {}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"fit": {"slab_overlap": 40}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"metrics": {"f_detect": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"threads": 0}"#).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut cfg = RunConfig::default();
        cfg.fit.mode = crate::objective::LossMode::Nll;
        cfg.threads = Some(2);
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }
}
