//! Articulated skeleton, forward kinematics, pinhole projection, heatmap
//! rendering, and synthetic corpus generation.
//!
//! The corpus stands in for a motion-capture dataset at desk scale: poses
//! are sampled as joint-angle configurations of a fixed 17-joint skeleton,
//! driven through bounded random walks to form short sequences, projected
//! with a pinhole camera, and rendered into per-joint heatmaps with a
//! configurable detector-noise model.
//!
//! Conventions: millimeters; x right, y down, z depth away from the
//! camera; all poses root-relative with the pelvis at the origin.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Current dataset file format version.
pub const DATASET_VERSION: &str = "diffkit-dataset/1";

// ── Skeleton definition ─────────────────────────────────────────────────

/// Joint tree with fixed bone offsets and per-joint angle limits.
///
/// The parent relation is topological: every non-root joint has a parent
/// with a smaller index, and the root (index 0) is its own parent.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkeletonSpec {
    parents: Vec<usize>,
    /// Bone vector from parent to joint in the rest pose, millimeters.
    offsets: Vec<[f64; 3]>,
    /// Symmetric per-joint rotation limit, radians, per Euler axis.
    angle_limits: Vec<f64>,
}

impl SkeletonSpec {
    pub fn new(
        parents: Vec<usize>,
        offsets: Vec<[f64; 3]>,
        angle_limits: Vec<f64>,
    ) -> Result<Self> {
        let j = parents.len();
        if j == 0 || offsets.len() != j || angle_limits.len() != j {
            return Err(Error::invalid("skeleton field lengths disagree"));
        }
        if parents[0] != 0 {
            return Err(Error::invalid("root joint must be its own parent"));
        }
        for (i, &p) in parents.iter().enumerate().skip(1) {
            if p >= i {
                return Err(Error::invalid(format!(
                    "joint {i} has non-topological parent {p}"
                )));
            }
            let len = norm3(&offsets[i]);
            if !(len > 0.0) {
                return Err(Error::invalid(format!("joint {i} has zero bone length")));
            }
        }
        for (i, &l) in angle_limits.iter().enumerate() {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::invalid(format!("joint {i} has invalid angle limit")));
            }
        }
        Ok(SkeletonSpec {
            parents,
            offsets,
            angle_limits,
        })
    }

    /// The default 17-joint skeleton in the Human3.6M joint convention:
    /// pelvis, right leg, left leg, spine/head chain, left arm, right arm.
    pub fn h36m17() -> Self {
        let parents = vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        let offsets = vec![
            [0.0, 0.0, 0.0],       // 0 pelvis (root)
            [-132.0, 0.0, 0.0],    // 1 right hip
            [0.0, 442.0, 0.0],     // 2 right knee
            [0.0, 454.0, 0.0],     // 3 right ankle
            [132.0, 0.0, 0.0],     // 4 left hip
            [0.0, 442.0, 0.0],     // 5 left knee
            [0.0, 454.0, 0.0],     // 6 left ankle
            [0.0, -233.0, 0.0],    // 7 spine
            [0.0, -257.0, 0.0],    // 8 thorax
            [0.0, -121.0, 0.0],    // 9 neck
            [0.0, -115.0, 0.0],    // 10 head
            [151.0, -45.0, 0.0],   // 11 left shoulder
            [278.0, 0.0, 0.0],     // 12 left elbow
            [252.0, 0.0, 0.0],     // 13 left wrist
            [-151.0, -45.0, 0.0],  // 14 right shoulder
            [-278.0, 0.0, 0.0],    // 15 right elbow
            [-252.0, 0.0, 0.0],    // 16 right wrist
        ];
        let angle_limits = vec![
            std::f64::consts::PI, // root orientation is free up to a half turn
            0.6, 1.2, 0.6,        // right leg
            0.6, 1.2, 0.6,        // left leg
            0.4, 0.4, 0.5, 0.5,   // spine, thorax, neck, head
            1.2, 1.3, 0.8,        // left arm
            1.2, 1.3, 0.8,        // right arm
        ];
        SkeletonSpec::new(parents, offsets, angle_limits).expect("builtin skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> usize {
        self.parents[j]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn angle_limit(&self, j: usize) -> f64 {
        self.angle_limits[j]
    }

    pub fn bone_length(&self, j: usize) -> f64 {
        norm3(&self.offsets[j])
    }

    /// Child-parent edge list over non-root joints.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..self.joint_count()).map(|j| (j, self.parents[j])).collect()
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

// ── Poses ───────────────────────────────────────────────────────────────

/// J×3 joint coordinates. Generated poses are root-relative millimeters;
/// the same container carries poses in normalized diffusion space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose3D {
    coords: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("pose must have at least one joint"));
        }
        if !coords.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "pose3d".into() });
        }
        Ok(Pose3D { coords })
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn joint(&self, j: usize) -> [f64; 3] {
        self.coords[j]
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// Joint-major flattening [x0, y0, z0, x1, ...], the layout shared with
    /// mixture fitting and diffusion.
    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || flat.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "flat pose length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Pose3D::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Translates so the root joint sits at the origin.
    pub fn rerooted(&self) -> Pose3D {
        let r = self.coords[0];
        Pose3D {
            coords: self
                .coords
                .iter()
                .map(|c| [c[0] - r[0], c[1] - r[1], c[2] - r[2]])
                .collect(),
        }
    }
}

/// J×2 image coordinates in normalized units (nominally [-1, 1], with
/// slack to [-1.5, 1.5] for detector-noise perturbations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose2D {
    coords: Vec<[f64; 2]>,
}

impl Pose2D {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("pose must have at least one joint"));
        }
        for c in coords.iter().flatten() {
            if !c.is_finite() || c.abs() > 1.5 {
                return Err(Error::invalid(format!(
                    "normalized image coordinate {c} outside [-1.5, 1.5]"
                )));
            }
        }
        Ok(Pose2D { coords })
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn joint(&self, j: usize) -> [f64; 2] {
        self.coords[j]
    }

    pub fn joints(&self) -> &[[f64; 2]] {
        &self.coords
    }
}

// ── Forward kinematics ──────────────────────────────────────────────────

/// Per-joint XYZ Euler angles, radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAngles {
    rads: Vec<[f64; 3]>,
}

impl JointAngles {
    pub fn new(rads: Vec<[f64; 3]>) -> Self {
        JointAngles { rads }
    }

    pub fn zero(joint_count: usize) -> Self {
        JointAngles {
            rads: vec![[0.0; 3]; joint_count],
        }
    }

    pub fn get(&self) -> &[[f64; 3]] {
        &self.rads
    }

    pub fn set(&mut self, j: usize, axis: usize, value: f64) {
        self.rads[j][axis] = value;
    }
}

fn rotation(rads: &[f64; 3]) -> Matrix3<f64> {
    let (sx, cx) = rads[0].sin_cos();
    let (sy, cy) = rads[1].sin_cos();
    let (sz, cz) = rads[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Poses the skeleton: each joint's frame is its parent's frame composed
/// with the joint's local rotation, and its position is the parent position
/// plus the rotated bone offset. Bone lengths are preserved exactly.
pub fn forward_kinematics(angles: &JointAngles, spec: &SkeletonSpec) -> Result<Pose3D> {
    let j = spec.joint_count();
    if angles.rads.len() != j {
        return Err(Error::invalid(format!(
            "angle count {} does not match joint count {j}",
            angles.rads.len()
        )));
    }
    for (i, a) in angles.rads.iter().enumerate() {
        let limit = spec.angle_limits[i];
        if a.iter().any(|v| !v.is_finite() || v.abs() > limit) {
            return Err(Error::invalid(format!(
                "joint {i} angles {a:?} exceed limit {limit}"
            )));
        }
    }
    let mut frames: Vec<Matrix3<f64>> = Vec::with_capacity(j);
    let mut coords = vec![[0.0; 3]; j];
    frames.push(rotation(&angles.rads[0]));
    for i in 1..j {
        let p = spec.parents[i];
        let frame = frames[p] * rotation(&angles.rads[i]);
        let o = spec.offsets[i];
        let rotated = frame * Vector3::new(o[0], o[1], o[2]);
        coords[i] = [
            coords[p][0] + rotated[0],
            coords[p][1] + rotated[1],
            coords[p][2] + rotated[2],
        ];
        frames.push(frame);
    }
    Pose3D::new(coords)
}

// ── Camera ──────────────────────────────────────────────────────────────

/// Pinhole camera looking down +z, with the skeleton root placed at a
/// fixed depth on the optical axis.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraModel {
    pub focal_px: f64,
    /// Half the sensor side in pixels; divides pixel coordinates into
    /// normalized units so u, v = ±1 at the sensor edges.
    pub half_size_px: f64,
    pub root_depth_mm: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            focal_px: 1150.0,
            half_size_px: 500.0,
            root_depth_mm: 5000.0,
        }
    }
}

impl CameraModel {
    /// Projects a root-relative pose: u = f·x/(z+d) in pixels, divided by
    /// the half size into normalized units.
    pub fn project(&self, pose: &Pose3D) -> Result<Pose2D> {
        let mut out = Vec::with_capacity(pose.joint_count());
        for (j, c) in pose.joints().iter().enumerate() {
            let depth = self.root_depth_mm + c[2];
            if depth <= 0.0 {
                return Err(Error::invalid(format!(
                    "joint {j} is behind the camera (depth {depth} mm)"
                )));
            }
            let u = self.focal_px * c[0] / depth / self.half_size_px;
            let v = self.focal_px * c[1] / depth / self.half_size_px;
            out.push([u, v]);
        }
        Pose2D::new(out)
    }

    /// Inverts the projection at known per-joint depths (z relative to the
    /// root), recovering x and y in millimeters.
    pub fn unproject_xy(&self, pose: &Pose2D, depths_mm: &[f64]) -> Result<Vec<[f64; 2]>> {
        if depths_mm.len() != pose.joint_count() {
            return Err(Error::invalid("depth count does not match joint count"));
        }
        let mut out = Vec::with_capacity(depths_mm.len());
        for (c, &z) in pose.joints().iter().zip(depths_mm) {
            let depth = self.root_depth_mm + z;
            if depth <= 0.0 {
                return Err(Error::invalid("non-positive depth in unprojection"));
            }
            let s = self.half_size_px * depth / self.focal_px;
            out.push([c[0] * s, c[1] * s]);
        }
        Ok(out)
    }
}

// ── Heatmaps ────────────────────────────────────────────────────────────

/// Rendering and detector-noise settings for heatmaps.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HeatmapConfig {
    /// Square grid side in pixels.
    pub size: u32,
    pub sigma_px: f64,
    /// Std of the Gaussian jitter applied to each joint's center.
    pub center_jitter_px: f64,
    /// When positive, each joint's sigma is inflated by a half-normal
    /// factor 1 + |N(0, this)|, imitating confidence-dependent blur.
    pub sigma_inflation: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            size: 64,
            sigma_px: 2.0,
            center_jitter_px: 1.5,
            sigma_inflation: 0.0,
        }
    }
}

/// One joint's heatmap, stored sparsely: only cells inside the truncated
/// Gaussian support carry weight; everything else is exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseHeatmap", into = "DenseHeatmap")]
pub struct Heatmap {
    size: u32,
    /// (row-major cell index, weight), weights summing to 1.
    cells: Vec<(u32, f64)>,
}

/// Serialized form: a dense row-major grid.
#[derive(Clone, Serialize, Deserialize)]
struct DenseHeatmap {
    size: u32,
    data: Vec<f64>,
}

impl From<Heatmap> for DenseHeatmap {
    fn from(h: Heatmap) -> Self {
        DenseHeatmap {
            size: h.size,
            data: h.dense(),
        }
    }
}

impl TryFrom<DenseHeatmap> for Heatmap {
    type Error = Error;

    fn try_from(d: DenseHeatmap) -> Result<Self> {
        if d.data.len() != (d.size * d.size) as usize {
            return Err(Error::invalid("heatmap data length does not match size"));
        }
        let cells: Vec<(u32, f64)> = d
            .data
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, &w)| (i as u32, w))
            .collect();
        Heatmap::new(d.size, cells)
    }
}

impl Heatmap {
    pub fn new(size: u32, cells: Vec<(u32, f64)>) -> Result<Self> {
        if size == 0 || cells.is_empty() {
            return Err(Error::invalid("heatmap must have at least one cell"));
        }
        let n = size * size;
        let mut sum = 0.0;
        for &(idx, w) in &cells {
            if idx >= n || !w.is_finite() || w < 0.0 {
                return Err(Error::invalid("heatmap cell out of range or negative"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("heatmap weights sum to {sum}, not 1")));
        }
        Ok(Heatmap { size, cells })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn cells(&self) -> &[(u32, f64)] {
        &self.cells
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; (self.size * self.size) as usize];
        for &(idx, w) in &self.cells {
            d[idx as usize] = w;
        }
        d
    }

    /// Pixel coordinates of a row-major cell index.
    pub fn cell_xy(&self, idx: u32) -> (u32, u32) {
        (idx % self.size, idx / self.size)
    }

    /// Weighted mean pixel position.
    pub fn centroid(&self) -> (f64, f64) {
        let mut cx = 0.0;
        let mut cy = 0.0;
        for &(idx, w) in &self.cells {
            let (x, y) = self.cell_xy(idx);
            cx += w * x as f64;
            cy += w * y as f64;
        }
        (cx, cy)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .cells
            .iter()
            .filter(|&&(_, w)| w > 0.0)
            .map(|&(_, w)| w * w.ln())
            .sum::<f64>()
    }
}

/// Per-joint heatmaps for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Heatmaps {
    joints: Vec<Heatmap>,
}

impl Heatmaps {
    pub fn new(joints: Vec<Heatmap>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::invalid("heatmaps must cover at least one joint"));
        }
        Ok(Heatmaps { joints })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint(&self, j: usize) -> &Heatmap {
        &self.joints[j]
    }
}

/// Converts a normalized image coordinate to continuous pixel units on a
/// grid whose pixel centers run 0..size-1.
pub fn to_pixel(u: f64, size: u32) -> f64 {
    (u + 1.0) / 2.0 * (size - 1) as f64
}

/// Inverse of [`to_pixel`].
pub fn to_normalized(px: f64, size: u32) -> f64 {
    2.0 * px / (size - 1) as f64 - 1.0
}

/// Renders one isotropic Gaussian bump per joint, centered at the joint's
/// pixel after detector jitter, truncated to exact zeros outside 5 sigma,
/// and renormalized to sum 1. Off-grid centers are clamped to the border.
pub fn render_heatmaps<R: Rng>(
    pose2d: &Pose2D,
    config: &HeatmapConfig,
    rng: &mut R,
) -> Result<Heatmaps> {
    if !(config.sigma_px > 0.0) {
        return Err(Error::invalid("heatmap sigma must be positive"));
    }
    if config.size < 2 {
        return Err(Error::invalid("heatmap grid must be at least 2x2"));
    }
    let size = config.size;
    let max_px = (size - 1) as f64;
    let jitter = Normal::new(0.0, config.center_jitter_px)
        .map_err(|_| Error::invalid("invalid center jitter std"))?;
    let mut joints = Vec::with_capacity(pose2d.joint_count());
    for c in pose2d.joints() {
        let mut cx = to_pixel(c[0], size);
        let mut cy = to_pixel(c[1], size);
        if config.center_jitter_px > 0.0 {
            cx += jitter.sample(rng);
            cy += jitter.sample(rng);
        }
        cx = cx.clamp(0.0, max_px);
        cy = cy.clamp(0.0, max_px);
        let mut sigma = config.sigma_px;
        if config.sigma_inflation > 0.0 {
            let extra: f64 = Normal::new(0.0, config.sigma_inflation)
                .map_err(|_| Error::invalid("invalid sigma inflation std"))?
                .sample(rng);
            sigma *= 1.0 + extra.abs();
        }
        let support = 5.0 * sigma;
        let x_lo = ((cx - support).floor().max(0.0)) as u32;
        let x_hi = ((cx + support).ceil().min(max_px)) as u32;
        let y_lo = ((cy - support).floor().max(0.0)) as u32;
        let y_hi = ((cy + support).ceil().min(max_px)) as u32;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut cells = Vec::new();
        let mut sum = 0.0;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let d2 = dx * dx + dy * dy;
                if d2 > support * support {
                    continue;
                }
                let w = (-d2 * inv).exp();
                sum += w;
                cells.push((y * size + x, w));
            }
        }
        for cell in &mut cells {
            cell.1 /= sum;
        }
        joints.push(Heatmap::new(size, cells)?);
    }
    Ok(Heatmaps { joints })
}

// ── Dataset ─────────────────────────────────────────────────────────────

/// Per-axis normalization between millimeter space and the unit-variance
/// diffusion space, computed from the training split.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// Moments over every (sample, joint) coordinate of the given poses.
    pub fn from_poses(poses: &[&Pose3D]) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = [0.0; 3];
        for p in poses {
            for c in p.joints() {
                for a in 0..3 {
                    mean[a] += c[a];
                }
            }
            n += p.joint_count();
        }
        if n == 0 {
            return Err(Error::invalid("no poses to compute statistics from"));
        }
        for a in &mut mean {
            *a /= n as f64;
        }
        let mut var = [0.0; 3];
        for p in poses {
            for c in p.joints() {
                for a in 0..3 {
                    let d = c[a] - mean[a];
                    var[a] += d * d;
                }
            }
        }
        let mut std = [0.0; 3];
        for a in 0..3 {
            std[a] = (var[a] / n as f64).sqrt();
            if !(std[a] > 0.0) {
                return Err(Error::invalid(format!("axis {a} has zero variance")));
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, pose: &Pose3D) -> Pose3D {
        Pose3D {
            coords: pose
                .joints()
                .iter()
                .map(|c| {
                    [
                        (c[0] - self.mean[0]) / self.std[0],
                        (c[1] - self.mean[1]) / self.std[1],
                        (c[2] - self.mean[2]) / self.std[2],
                    ]
                })
                .collect(),
        }
    }

    pub fn denormalize(&self, pose: &Pose3D) -> Pose3D {
        Pose3D {
            coords: pose
                .joints()
                .iter()
                .map(|c| {
                    [
                        c[0] * self.std[0] + self.mean[0],
                        c[1] * self.std[1] + self.mean[1],
                        c[2] * self.std[2] + self.mean[2],
                    ]
                })
                .collect(),
        }
    }
}

/// One synthetic observation: a labeled center pose, its surrounding 2D
/// sequence, and the center frame's rendered heatmaps.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Root-relative millimeters, center frame.
    pub pose3d: Pose3D,
    /// 2T+1 projected frames; the center frame is index T.
    pub seq2d: Vec<Pose2D>,
    pub heatmaps: Heatmaps,
}

/// Synthetic corpus with train/test splits and train-split statistics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub version: String,
    pub skeleton: SkeletonSpec,
    pub camera: CameraModel,
    pub heatmap_config: HeatmapConfig,
    pub seq_half_len: usize,
    pub seed: u64,
    pub norm_stats: NormStats,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Corpus generation settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Sequence half-length T; sequences have 2T+1 frames.
    pub seq_half_len: usize,
    pub seed: u64,
    pub heatmap: HeatmapConfig,
    pub camera: CameraModel,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train_count: 2000,
            test_count: 500,
            seq_half_len: 4,
            seed: 0,
            heatmap: HeatmapConfig::default(),
            camera: CameraModel::default(),
        }
    }
}

/// Maximum per-frame, per-axis angle change along a sequence, radians.
pub const WALK_STEP_RAD: f64 = 0.05;

/// Fraction of each joint's limit used when drawing the initial frame,
/// leaving headroom for the random walk.
const INITIAL_RANGE: f64 = 0.8;

fn draw_initial_angles<R: Rng>(spec: &SkeletonSpec, rng: &mut R) -> JointAngles {
    let rads = (0..spec.joint_count())
        .map(|j| {
            let l = spec.angle_limit(j) * INITIAL_RANGE;
            if l > 0.0 {
                [
                    rng.gen_range(-l..l),
                    rng.gen_range(-l..l),
                    rng.gen_range(-l..l),
                ]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    JointAngles::new(rads)
}

fn walk_angles<R: Rng>(spec: &SkeletonSpec, prev: &JointAngles, rng: &mut R) -> JointAngles {
    let rads = prev
        .get()
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let l = spec.angle_limit(j);
            let mut next = [0.0; 3];
            for (axis, n) in next.iter_mut().enumerate() {
                *n = (a[axis] + rng.gen_range(-WALK_STEP_RAD..WALK_STEP_RAD)).clamp(-l, l);
            }
            next
        })
        .collect();
    JointAngles::new(rads)
}

fn gen_sample(
    cfg: &GenConfig,
    spec: &SkeletonSpec,
    global_index: u64,
) -> Result<(Pose3D, Vec<Pose2D>, Heatmaps)> {
    let mut r = rng::stream(cfg.seed, tag::DATASET_SAMPLE, global_index);
    let frames = 2 * cfg.seq_half_len + 1;
    let mut angles = draw_initial_angles(spec, &mut r);
    let mut seq2d = Vec::with_capacity(frames);
    let mut center_pose = None;
    for f in 0..frames {
        if f > 0 {
            angles = walk_angles(spec, &angles, &mut r);
        }
        let pose = forward_kinematics(&angles, spec)?;
        seq2d.push(cfg.camera.project(&pose)?);
        if f == cfg.seq_half_len {
            center_pose = Some(pose);
        }
    }
    let pose3d = center_pose.expect("center frame index is within range");
    let heatmaps = render_heatmaps(&seq2d[cfg.seq_half_len], &cfg.heatmap, &mut r)?;
    Ok((pose3d, seq2d, heatmaps))
}

/// Generates the full corpus deterministically from the seed. Each sample
/// consumes its own derived stream, so generation order cannot leak
/// randomness across samples.
pub fn gen_dataset(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.train_count == 0 || cfg.test_count == 0 {
        return Err(Error::invalid("train and test counts must be positive"));
    }
    let spec = SkeletonSpec::h36m17();
    let mut train = Vec::with_capacity(cfg.train_count);
    let mut test = Vec::with_capacity(cfg.test_count);
    for i in 0..cfg.train_count + cfg.test_count {
        let (pose3d, seq2d, heatmaps) = gen_sample(cfg, &spec, i as u64)?;
        let sample = Sample {
            id: i,
            pose3d,
            seq2d,
            heatmaps,
        };
        if i < cfg.train_count {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    let norm_stats = NormStats::from_poses(&train.iter().map(|s| &s.pose3d).collect::<Vec<_>>())?;
    Ok(Dataset {
        version: DATASET_VERSION.to_string(),
        skeleton: spec,
        camera: cfg.camera,
        heatmap_config: cfg.heatmap,
        seq_half_len: cfg.seq_half_len,
        seed: cfg.seed,
        norm_stats,
        train,
        test,
    })
}

// ── Depth histograms ────────────────────────────────────────────────────

/// Binned depth frequencies for one joint over the training split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Histogram {
    /// Bin edges, length bins+1; a degenerate joint has the single edge
    /// pair [z, z].
    pub edges: Vec<f64>,
    /// Normalized frequencies summing to 1, length bins.
    pub freqs: Vec<f64>,
}

impl Histogram {
    pub fn bin_count(&self) -> usize {
        self.freqs.len()
    }

    /// Frequency-weighted mean of bin centers.
    pub fn mean(&self) -> f64 {
        self.freqs
            .iter()
            .enumerate()
            .map(|(b, f)| f * 0.5 * (self.edges[b] + self.edges[b + 1]))
            .sum()
    }
}

/// Per-joint depth histograms.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct DepthHistograms {
    pub joints: Vec<Histogram>,
}

/// Computes the per-joint occurrence frequencies of z values over the
/// training split, on `bins` equal-width bins spanning [min z, max z] per
/// joint. A joint whose z never varies collapses to a single-bin point
/// mass.
pub fn z_histogram(dataset: &Dataset, bins: usize) -> Result<DepthHistograms> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset has no training split"));
    }
    let j = dataset.skeleton.joint_count();
    let mut joints = Vec::with_capacity(j);
    for joint in 0..j {
        let zs: Vec<f64> = dataset.train.iter().map(|s| s.pose3d.joint(joint)[2]).collect();
        let lo = zs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            joints.push(Histogram {
                edges: vec![lo, hi],
                freqs: vec![1.0],
            });
            continue;
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &z in &zs {
            let b = (((z - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let total = zs.len() as f64;
        // pin the last edge to the exact maximum so the span is tight
        let edges = (0..=bins)
            .map(|b| if b == bins { hi } else { lo + b as f64 * width })
            .collect();
        let freqs = counts.iter().map(|&c| c as f64 / total).collect();
        joints.push(Histogram { edges, freqs });
    }
    Ok(DepthHistograms { joints })
}
