//! Peak extraction and fit-vs-truth metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot3, ConstrainedField};
use crate::objective::mse_loss;
use crate::phantom::GroundTruth;
use crate::volume::SignalVolume;

pub const DEFAULT_F_DETECT: f64 = 0.05;
pub const DEFAULT_ANGLE_TOL: f64 = 25.0;
/// Kept fibers closer than this (degrees) are merged into one peak.
pub const MERGE_ANGLE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub direction: [f64; 3],
    pub fraction: f64,
}

/// Per-voxel peaks, fractions descending.
pub type FiberPeakSet = Vec<Vec<Peak>>;

/// Antipodally symmetric angle between two unit vectors, in degrees.
pub fn axis_angle(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dot3(a, b).abs().min(1.0).acos().to_degrees()
}

/// Peaks of one voxel: fibers with fraction at least `f_detect`, with
/// near-duplicates merged.
pub fn voxel_peaks(dirs: &[[f64; 3]], fractions: &[f64], f_detect: f64) -> Vec<Peak> {
    let mut kept: Vec<(usize, f64)> =
        fractions.iter().copied().enumerate().filter(|&(_, f)| f >= f_detect).collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut sums: Vec<([f64; 3], f64, [f64; 3])> = Vec::new();
    for (j, f) in kept {
        let d = dirs[j];
        match sums.iter_mut().find(|(_, _, lead)| axis_angle(lead, &d) < MERGE_ANGLE) {
            Some((acc, total, lead)) => {
                let s = if dot3(lead, &d) < 0.0 { -f } else { f };
                for c in 0..3 {
                    acc[c] += s * d[c];
                }
                *total += f;
            }
            None => sums.push(([f * d[0], f * d[1], f * d[2]], f, d)),
        }
    }
    let mut peaks: Vec<Peak> = sums
        .into_iter()
        .map(|(acc, total, _)| {
            let n = dot3(&acc, &acc).sqrt();
            Peak { direction: [acc[0] / n, acc[1] / n, acc[2] / n], fraction: total }
        })
        .collect();
    peaks.sort_by(|a, b| b.fraction.total_cmp(&a.fraction));
    peaks
}

/// Peaks for every voxel of a constrained field, using the WM fiber fractions.
pub fn extract_peaks(field: &ConstrainedField, f_detect: f64) -> Result<FiberPeakSet> {
    if !(f_detect > 0.0 && f_detect < 1.0) {
        return Err(Error::Config(format!("f_detect {f_detect} outside (0, 1)")));
    }
    Ok((0..field.n_voxels())
        .map(|v| voxel_peaks(field.dirs(v), field.wm_fractions(v), f_detect))
        .collect())
}

/// Mean over ground-truth fibers of the angle to the closest predicted peak.
/// `None` when nothing was predicted.
pub fn best_match_error(gt: &[[f64; 3]], pred: &[Peak]) -> Option<f64> {
    if pred.is_empty() || gt.is_empty() {
        return None;
    }
    let total: f64 = gt
        .iter()
        .map(|g| pred.iter().map(|p| axis_angle(g, &p.direction)).fold(f64::INFINITY, f64::min))
        .sum();
    Some(total / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Detection {
    pub fn add(&mut self, other: Detection) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Greedy one-to-one matching in ascending angle order within `angle_tol`.
pub fn match_voxel(gt: &[[f64; 3]], pred: &[Peak], angle_tol: f64) -> Detection {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(gt.len() * pred.len());
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let a = axis_angle(g, &p.direction);
            if a <= angle_tol {
                pairs.push((a, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            tp += 1;
        }
    }
    Detection { tp, fp: pred.len() - tp, fn_: gt.len() - tp }
}

/// Aggregated (precision, recall, F1) over voxels.
pub fn detection_prf(gt: &[Vec<[f64; 3]>], pred: &[Vec<Peak>], angle_tol: f64) -> (f64, f64, f64) {
    let mut d = Detection::default();
    for (g, p) in gt.iter().zip(pred) {
        d.add(match_voxel(g, p, angle_tol));
    }
    (d.precision(), d.recall(), d.f1())
}

pub fn sigma_recovery(fitted: f64, truth: f64) -> Result<f64> {
    if !(truth > 0.0) {
        return Err(Error::InvalidInput("true sigma must be positive".into()));
    }
    Ok((fitted - truth).abs() / truth)
}

/// Mean squared residual over masked voxel-measurement pairs.
pub fn reconstruction_mse(y_hat: &SignalVolume, y: &SignalVolume, mask: &[bool]) -> Result<f64> {
    mse_loss(y_hat, y, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    /// Crossing angle in degrees; `None` for single-fiber controls.
    pub angle: Option<f64>,
    pub voxels: usize,
    /// Voxels with no detected peak, excluded from `mean_error`.
    pub missed: usize,
    pub mean_error: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f_detect: f64,
    pub angle_tol: f64,
    pub rows: Vec<AngleRow>,
    pub overall: AngleRow,
    /// Crossing voxels at 60 degrees or wider.
    pub wide_angle_error: Option<f64>,
    pub sigma_fit: Option<f64>,
    pub sigma_true: Option<f64>,
    pub sigma_relative_error: Option<f64>,
    pub reconstruction_mse: Option<f64>,
}

impl EvalReport {
    pub fn row(&self, angle: f64) -> Option<&AngleRow> {
        self.rows.iter().find(|r| r.angle == Some(angle))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle,voxels,missed,mean_error,precision,recall,f1\n");
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let label = match (r.angle, std::ptr::eq(r, &self.overall)) {
                (_, true) => "all".to_string(),
                (Some(a), _) => format!("{a}"),
                (None, _) => "single".to_string(),
            };
            out.push_str(&format!(
                "{label},{},{},{},{},{},{}\n",
                r.voxels, r.missed, r.mean_error, r.precision, r.recall, r.f1
            ));
        }
        out
    }
}

fn summarize(angle: Option<f64>, items: &[(Option<f64>, Detection)]) -> AngleRow {
    let mut d = Detection::default();
    let mut sum = 0.0;
    let mut hit = 0;
    for (e, det) in items {
        d.add(*det);
        if let Some(e) = e {
            sum += e;
            hit += 1;
        }
    }
    AngleRow {
        angle,
        voxels: items.len(),
        missed: items.len() - hit,
        mean_error: if hit > 0 { sum / hit as f64 } else { f64::NAN },
        precision: d.precision(),
        recall: d.recall(),
        f1: d.f1(),
    }
}

/// Per-angle and overall metrics of `peaks` against `truth`.
pub fn evaluate(truth: &GroundTruth, peaks: &FiberPeakSet, angle_tol: f64, f_detect: f64) -> Result<EvalReport> {
    if peaks.len() != truth.voxels.len() {
        return Err(Error::DataMismatch(format!(
            "{} fitted voxels, {} ground-truth voxels",
            peaks.len(),
            truth.voxels.len()
        )));
    }
    if !(angle_tol > 0.0) {
        return Err(Error::Config("angle tolerance must be positive".into()));
    }
    let per_voxel: Vec<(Option<f64>, Detection)> = truth
        .voxels
        .iter()
        .zip(peaks)
        .map(|(t, p)| (best_match_error(&t.directions, p), match_voxel(&t.directions, p, angle_tol)))
        .collect();
    let mut rows = Vec::new();
    let mut labels: Vec<Option<f64>> = truth.angles().into_iter().map(Some).collect();
    if truth.voxels.iter().any(|t| t.angle.is_none()) {
        labels.push(None);
    }
    for label in labels {
        let items: Vec<_> = truth
            .voxels
            .iter()
            .zip(&per_voxel)
            .filter(|(t, _)| t.angle == label)
            .map(|(_, x)| *x)
            .collect();
        rows.push(summarize(label, &items));
    }
    let wide: Vec<_> = truth
        .voxels
        .iter()
        .zip(&per_voxel)
        .filter(|(t, _)| t.angle.is_some_and(|a| a >= 60.0))
        .map(|(_, x)| *x)
        .collect();
    let wide_angle_error = if wide.is_empty() { None } else { Some(summarize(None, &wide).mean_error) };
    Ok(EvalReport {
        f_detect,
        angle_tol,
        rows,
        overall: summarize(None, &per_voxel),
        wide_angle_error,
        sigma_fit: None,
        sigma_true: None,
        sigma_relative_error: None,
        reconstruction_mse: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: [f64; 3] = [1.0, 0.0, 0.0];
    const Y: [f64; 3] = [0.0, 1.0, 0.0];
    const Z: [f64; 3] = [0.0, 0.0, 1.0];

    fn peak(d: [f64; 3]) -> Peak {
        Peak { direction: d, fraction: 0.5 }
    }

    fn tilted(deg: f64) -> [f64; 3] {
        let (s, c) = deg.to_radians().sin_cos();
        [s, 0.0, c]
    }

    #[test]
    fn peak_extraction_examples() {
        assert_eq!(voxel_peaks(&[Z, X], &[0.5, 0.001], 0.05).len(), 1);
        let merged = voxel_peaks(&[Z, tilted(2.0)], &[0.3, 0.2], 0.05);
        assert_eq!(merged.len(), 1);
        assert!((merged[0].fraction - 0.5).abs() < 1e-15);
        let a = axis_angle(&merged[0].direction, &Z);
        assert!(a > 0.0 && a < 2.0);
        // antipodal duplicate merges too
        assert_eq!(voxel_peaks(&[Z, [0.0, 0.0, -1.0]], &[0.3, 0.2], 0.05).len(), 1);
        let two = voxel_peaks(&[tilted(60.0), Z], &[0.3, 0.4], 0.05);
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].fraction, 0.4);
    }

    #[test]
    fn best_match_examples() {
        assert_eq!(best_match_error(&[Z, X], &[peak(Z), peak(X)]), Some(0.0));
        assert_eq!(best_match_error(&[Z], &[peak([0.0, 0.0, -1.0])]), Some(0.0));
        let e = best_match_error(&[Z, X], &[peak(Z)]).unwrap();
        assert!((e - 45.0).abs() < 1e-12);
        assert_eq!(best_match_error(&[Z], &[]), None);
    }

    #[test]
    fn detection_examples() {
        let (p, r, f) = detection_prf(&[vec![Z, X]], &[vec![peak(Z), peak(X)]], 25.0);
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
        let (p, r, f) = detection_prf(&[vec![Z, X]], &[vec![peak(Z)]], 25.0);
        assert_eq!((p, r), (1.0, 0.5));
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        let (p, r, _) = detection_prf(&[vec![Z, X]], &[vec![peak(Z), peak(X), peak(Y)]], 25.0);
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn greedy_takes_closest_pair_first() {
        // pred 0 is 10 deg from gt 0 and 15 from gt 1; pred 1 is 20 from gt 0.
        // Greedy locks in (gt 0, pred 0) and leaves gt 1 unmatched, where an
        // optimal assignment would find two matches.
        let g0 = Z;
        let g1 = tilted(25.0);
        let p0 = tilted(10.0);
        let p1 = tilted(-20.0);
        let d = match_voxel(&[g0, g1], &[peak(p0), peak(p1)], 25.0);
        assert_eq!(d, Detection { tp: 1, fp: 1, fn_: 1 });
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_recovery(0.5, 0.5).unwrap(), 0.0);
        assert!((sigma_recovery(0.0367, 1.0 / 30.0).unwrap() - 0.101).abs() < 1e-12);
        assert_eq!(sigma_recovery(0.0, 0.2).unwrap(), 1.0);
        assert!(sigma_recovery(0.1, 0.0).is_err());
    }

    #[test]
    fn reconstruction_matches_mse_loss() {
        let y = SignalVolume::new([2, 1, 1], 2, vec![1.0, 0.5, 0.4, 0.2], vec![true, true]).unwrap();
        let mut yh = y.clone();
        yh.data.iter_mut().for_each(|x| *x += 0.1);
        let r = reconstruction_mse(&yh, &y, &y.mask).unwrap();
        assert!((r - 0.01).abs() < 1e-15);
        assert_eq!(r.to_bits(), mse_loss(&yh, &y, &y.mask).unwrap().to_bits());
        assert_eq!(reconstruction_mse(&y, &y, &y.mask).unwrap(), 0.0);
    }

    #[test]
    fn perfect_fit_report() {
        use crate::phantom::TruthVoxel;
        let truth = GroundTruth {
            dims: [3, 1, 1],
            sigma: 0.1,
            snr: 10.0,
            sigma_g: 0.0,
            gains: vec![],
            voxels: vec![
                TruthVoxel { angle: Some(90.0), directions: vec![Z, X], fractions: vec![0.5, 0.5] },
                TruthVoxel { angle: Some(60.0), directions: vec![Z, tilted(60.0)], fractions: vec![0.5, 0.5] },
                TruthVoxel { angle: None, directions: vec![Y], fractions: vec![1.0] },
            ],
        };
        let peaks: FiberPeakSet =
            truth.voxels.iter().map(|t| t.directions.iter().map(|&d| peak(d)).collect()).collect();
        let r = evaluate(&truth, &peaks, 25.0, 0.05).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows.iter().map(|r| r.angle).collect::<Vec<_>>(), vec![Some(90.0), Some(60.0), None]);
        assert!(r.overall.mean_error < 1e-6);
        assert_eq!(r.overall.f1, 1.0);
        assert!(r.wide_angle_error.unwrap() < 1e-6);
        assert!(r.to_csv().lines().count() == 5);
        assert!(evaluate(&truth, &peaks[..2].to_vec(), 25.0, 0.05).is_err());
    }
}
