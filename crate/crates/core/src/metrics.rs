//! Pose accuracy metrics: MPJPE, Procrustes-aligned MPJPE, PCK, and AUC,
//! reported per sample and as dataset means.
//!
//! All distances are in the pose's native units (millimeters for this
//! project's data). Alignment uses the closed-form least-squares
//! similarity transform, so the aligned error is a deterministic function
//! of the two poses.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Pose3D;

/// PCK threshold used in the headline metric, millimeters.
pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// Thresholds for the area-under-curve metric: 5 mm to 150 mm in 5 mm
/// steps, 30 values.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

fn check_pair(pred: &Pose3D, gt: &Pose3D) -> Result<usize> {
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            detail: format!(
                "prediction has {} joints, ground truth {}",
                pred.joint_count(),
                gt.joint_count()
            ),
        });
    }
    Ok(pred.joint_count())
}

fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    Ok(pred
        .joints()
        .iter()
        .zip(gt.joints())
        .map(|(p, g)| {
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .collect())
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let errs = joint_errors(pred, gt)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Least-squares alignment of `pred` onto `gt`: rotation and translation,
/// plus a uniform scale when `with_scale` is set. Returns the transformed
/// prediction. Fails if the prediction has no spatial extent, since no
/// alignment is then better than any other.
pub fn align_pose(pred: &Pose3D, gt: &Pose3D, with_scale: bool) -> Result<Pose3D> {
    let n = check_pair(pred, gt)?;
    let nf = n as f64;
    let mut mx = [0.0; 3];
    let mut my = [0.0; 3];
    for i in 0..n {
        for a in 0..3 {
            mx[a] += pred.joints()[i][a] / nf;
            my[a] += gt.joints()[i][a] / nf;
        }
    }
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for i in 0..n {
        let xc: Vec<f64> = (0..3).map(|a| pred.joints()[i][a] - mx[a]).collect();
        let yc: Vec<f64> = (0..3).map(|a| gt.joints()[i][a] - my[a]).collect();
        var_x += (xc[0] * xc[0] + xc[1] * xc[1] + xc[2] * xc[2]) / nf;
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += yc[r] * xc[c] / nf;
            }
        }
    }
    if !(var_x > 1e-12) {
        return Err(Error::invalid("prediction has no spatial extent to align"));
    }
    let svd = cov.svd(true, true);
    let u: Matrix3<f64> =
        svd.u.ok_or_else(|| Error::invalid("alignment decomposition failed"))?;
    let v_t: Matrix3<f64> =
        svd.v_t.ok_or_else(|| Error::invalid("alignment decomposition failed"))?;
    // Flip the smallest axis if the best orthogonal map is a reflection.
    let d = if u.determinant() * v_t.determinant() < 0.0 { -1.0 } else { 1.0 };
    let mut s_fix = Matrix3::identity();
    s_fix[(2, 2)] = d;
    let r: Matrix3<f64> = u * s_fix * v_t;
    let sv: Vector3<f64> = svd.singular_values;
    let scale = if with_scale { (sv[0] + sv[1] + d * sv[2]) / var_x } else { 1.0 };
    let coords = (0..n)
        .map(|i| {
            let x = pred.joints()[i];
            let mut y = [0.0; 3];
            for a in 0..3 {
                let rx: f64 = (0..3).map(|b| r[(a, b)] * (x[b] - mx[b])).sum();
                y[a] = scale * rx + my[a];
            }
            y
        })
        .collect();
    Pose3D::new(coords)
}

/// MPJPE after similarity alignment (rotation, translation, scale).
pub fn p_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    mpjpe(&align_pose(pred, gt, true)?, gt)
}

/// Fraction of joints, in percent, whose error is strictly below the
/// threshold.
pub fn pck(pred: &Pose3D, gt: &Pose3D, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("PCK threshold must be positive"));
    }
    let errs = joint_errors(pred, gt)?;
    let hits = errs.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errs.len() as f64)
}

/// Mean PCK over the 5..150 mm threshold ladder, in percent.
pub fn auc(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let thresholds = auc_thresholds();
    let mut total = 0.0;
    for &t in &thresholds {
        total += pck(pred, gt, t)?;
    }
    Ok(total / thresholds.len() as f64)
}

/// All four metrics for one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
}

/// Per-sample metrics plus their unweighted means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

/// Evaluates paired predictions against ground truth. The aggregate is the
/// plain mean of the per-sample values.
pub fn evaluate_poses(preds: &[Pose3D], gts: &[Pose3D]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics need at least one pose pair"));
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} ground-truth poses",
            preds.len(),
            gts.len()
        )));
    }
    let per_sample: Vec<SampleMetrics> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            Ok(SampleMetrics {
                mpjpe: mpjpe(p, g)?,
                p_mpjpe: p_mpjpe(p, g)?,
                pck: pck(p, g, PCK_THRESHOLD_MM)?,
                auc: auc(p, g)?,
            })
        })
        .collect::<Result<_>>()?;
    let nf = per_sample.len() as f64;
    let mean = SampleMetrics {
        mpjpe: per_sample.iter().map(|m| m.mpjpe).sum::<f64>() / nf,
        p_mpjpe: per_sample.iter().map(|m| m.p_mpjpe).sum::<f64>() / nf,
        pck: per_sample.iter().map(|m| m.pck).sum::<f64>() / nf,
        auc: per_sample.iter().map(|m| m.auc).sum::<f64>() / nf,
    };
    Ok(MetricReport { per_sample, mean })
}
