//! Forward and reverse diffusion over poses.
//!
//! The forward process blends a ground-truth pose toward a prior as the
//! step index k grows: either toward a standard normal (the classic
//! formulation) or toward one component of a fitted Gaussian mixture, so
//! that at k = K the distribution matches the per-sample uncertainty
//! model rather than white noise. The reverse process walks a trained
//! denoiser back down the schedule, optionally visiting only a strided
//! subset of the steps.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posedist::GmmSampler;
use crate::skeleton::Pose3D;

// ── Schedule ────────────────────────────────────────────────────────────

/// Variance schedule: per-step noise fractions beta_k and their running
/// signal products alpha_k, indexed 1..=K.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
}

/// Builds a linear schedule: beta_k interpolates from `beta_start` at
/// k = 1 to `beta_end` at k = K, and alpha_k is the running product of
/// (1 - beta_i). Requires 0 < beta_start <= beta_end < 1 and K >= 2.
pub fn make_schedule(k_max: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if k_max < 2 {
        return Err(Error::invalid(format!("schedule needs K >= 2, got {k_max}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(k_max);
    let mut alphas = Vec::with_capacity(k_max);
    let mut product = 1.0;
    for k in 1..=k_max {
        // endpoints are pinned exactly; interior points interpolate
        let beta = if k == k_max {
            beta_end
        } else {
            beta_start + (k - 1) as f64 / (k_max - 1) as f64 * (beta_end - beta_start)
        };
        product *= 1.0 - beta;
        betas.push(beta);
        alphas.push(product);
    }
    Ok(DiffusionSchedule { betas, alphas })
}

impl DiffusionSchedule {
    pub fn k_max(&self) -> usize {
        self.betas.len()
    }

    /// beta_k for k in 1..=K.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// alpha_k for k in 0..=K, with alpha_0 = 1.
    pub fn alpha(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alphas[k - 1]
        }
    }
}

// ── Forward process ─────────────────────────────────────────────────────

/// Shared blend: mean + sqrt(alpha) * (h - mean) + sqrt(1 - alpha) * noise,
/// elementwise over the flattened pose.
fn blend(mean: &[f64], h: &[f64], alpha: f64, noise: &[f64]) -> Vec<f64> {
    let sa = alpha.sqrt();
    let sn = (1.0 - alpha).sqrt();
    // written so full signal (alpha = 1) returns h bit-exactly
    mean.iter()
        .zip(h)
        .zip(noise)
        .map(|((&m, &x), &e)| sa * x + (1.0 - sa) * m + sn * e)
        .collect()
}

fn check_step(schedule: &DiffusionSchedule, k: usize) -> Result<()> {
    if k == 0 || k > schedule.k_max() {
        return Err(Error::invalid(format!(
            "step {k} outside schedule range 1..={}",
            schedule.k_max()
        )));
    }
    Ok(())
}

/// Diffuses toward a standard normal: sqrt(alpha_k) h0 + sqrt(1-alpha_k) eps
/// with isotropic unit noise.
pub fn forward_standard<R: Rng>(
    h0: &Pose3D,
    k: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Pose3D> {
    check_step(schedule, k)?;
    let flat = h0.flat();
    let noise: Vec<f64> = (0..flat.len()).map(|_| rng.sample(StandardNormal)).collect();
    let zeros = vec![0.0; flat.len()];
    Pose3D::from_flat(&blend(&zeros, &flat, schedule.alpha(k), &noise))
}

/// One Markov step of the standard forward process: blends the previous
/// state toward zero with ratio alpha_k/alpha_{k-1} and unit noise.
/// Composing steps 1..=k from h0 reproduces [`forward_standard`]'s
/// marginal.
pub fn forward_standard_stepwise<R: Rng>(
    h_prev: &Pose3D,
    k: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Pose3D> {
    check_step(schedule, k)?;
    let flat = h_prev.flat();
    let noise: Vec<f64> = (0..flat.len()).map(|_| rng.sample(StandardNormal)).collect();
    let zeros = vec![0.0; flat.len()];
    let ratio = schedule.alpha(k) / schedule.alpha(k - 1);
    Pose3D::from_flat(&blend(&zeros, &flat, ratio, &noise))
}

fn check_component(sampler: &GmmSampler, h0: &Pose3D, component: usize) -> Result<()> {
    if component >= sampler.component_count() {
        return Err(Error::invalid(format!(
            "component {component} outside mixture of size {}",
            sampler.component_count()
        )));
    }
    if sampler.dim() != 3 * h0.joint_count() {
        return Err(Error::invalid(format!(
            "mixture dimension {} does not match pose dimension {}",
            sampler.dim(),
            3 * h0.joint_count()
        )));
    }
    Ok(())
}

/// Diffuses toward mixture component `component`: the pose is pulled
/// toward the component mean while component-shaped noise is blended in,
/// so at alpha -> 0 the marginal is exactly that Gaussian.
pub fn forward_gmm<R: Rng>(
    h0: &Pose3D,
    k: usize,
    schedule: &DiffusionSchedule,
    sampler: &GmmSampler,
    component: usize,
    rng: &mut R,
) -> Result<Pose3D> {
    check_step(schedule, k)?;
    check_component(sampler, h0, component)?;
    let noise = sampler.draw_noise(component, rng);
    Pose3D::from_flat(&blend(
        sampler.mean(component),
        &h0.flat(),
        schedule.alpha(k),
        &noise,
    ))
}

/// One Markov step of the mixture-centered forward process: blends the
/// previous state toward the component mean with ratio alpha_k/alpha_{k-1}.
/// Composing steps 1..=k from h0 reproduces [`forward_gmm`]'s marginal.
pub fn forward_gmm_stepwise<R: Rng>(
    h_prev: &Pose3D,
    k: usize,
    schedule: &DiffusionSchedule,
    sampler: &GmmSampler,
    component: usize,
    rng: &mut R,
) -> Result<Pose3D> {
    check_step(schedule, k)?;
    check_component(sampler, h_prev, component)?;
    let ratio = schedule.alpha(k) / schedule.alpha(k - 1);
    let noise = sampler.draw_noise(component, rng);
    Pose3D::from_flat(&blend(
        sampler.mean(component),
        &h_prev.flat(),
        ratio,
        &noise,
    ))
}

// ── Trajectories ────────────────────────────────────────────────────────

/// One forward trajectory: the ground-truth pose at index 0 and its
/// diffused states at every step up to K. Mixture-centered trajectories
/// keep a single component for their whole length.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub sample_index: usize,
    /// Mixture component the trajectory is centered on; `None` for the
    /// standard process.
    pub component: Option<usize>,
    /// states[k] is the pose at step k; states[0] is the ground truth,
    /// bit-exact.
    pub states: Vec<Pose3D>,
}

/// Draws `n` mixture-centered trajectories for one sample. Each draws its
/// component once, then advances the pose one Markov step per index, so
/// adjacent states are a coupled pair from a single chain.
pub fn make_trajectories<R: Rng>(
    h0: &Pose3D,
    sample_index: usize,
    schedule: &DiffusionSchedule,
    sampler: &GmmSampler,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let component = sampler.draw_component(rng);
        let mut states = Vec::with_capacity(schedule.k_max() + 1);
        states.push(h0.clone());
        for k in 1..=schedule.k_max() {
            let next = forward_gmm_stepwise(&states[k - 1], k, schedule, sampler, component, rng)?;
            states.push(next);
        }
        out.push(Trajectory {
            sample_index,
            component: Some(component),
            states,
        });
    }
    Ok(out)
}

/// Standard-process counterpart of [`make_trajectories`].
pub fn make_trajectories_standard<R: Rng>(
    h0: &Pose3D,
    sample_index: usize,
    schedule: &DiffusionSchedule,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut states = Vec::with_capacity(schedule.k_max() + 1);
        states.push(h0.clone());
        for k in 1..=schedule.k_max() {
            let next = forward_standard_stepwise(&states[k - 1], k, schedule, rng)?;
            states.push(next);
        }
        out.push(Trajectory {
            sample_index,
            component: None,
            states,
        });
    }
    Ok(out)
}

// ── Reverse process ─────────────────────────────────────────────────────

/// A trained reverse step: maps a batch of poses at step k to their
/// denoised predecessors.
pub trait ReverseModel {
    fn step(&self, poses: &[Pose3D], k: usize) -> Result<Vec<Pose3D>>;
}

impl<F> ReverseModel for F
where
    F: Fn(&[Pose3D], usize) -> Result<Vec<Pose3D>>,
{
    fn step(&self, poses: &[Pose3D], k: usize) -> Result<Vec<Pose3D>> {
        self(poses, k)
    }
}

/// The descending step indices visited by an `s`-step reverse pass over a
/// K-step schedule: K, K - floor(K/s), ..., down to K - (s-1) floor(K/s).
/// With s = K this is every step; requires 1 <= s <= K.
pub fn strided_indices(k_max: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > k_max {
        return Err(Error::invalid(format!(
            "stride count {s} outside 1..={k_max}"
        )));
    }
    let step = k_max / s;
    Ok((0..s).map(|j| k_max - j * step).collect())
}

/// Runs the model once per index, feeding each output in as the state at
/// the next visited index. The full and strided passes share this walk, so
/// s = K reproduces the full chain bit for bit.
pub fn reverse_with_indices<M: ReverseModel>(
    model: &M,
    start: Vec<Pose3D>,
    indices: &[usize],
) -> Result<Vec<Pose3D>> {
    if start.is_empty() {
        return Err(Error::invalid("reverse pass needs at least one pose"));
    }
    let mut h = start;
    for &k in indices {
        let next = model.step(&h, k).map_err(|e| match e {
            Error::NonFinite { op } => Error::NonFinite {
                op: format!("{op} at reverse step {k}"),
            },
            other => other,
        })?;
        if next.len() != h.len() {
            return Err(Error::invalid(format!(
                "reverse step {k} changed the batch size from {} to {}",
                h.len(),
                next.len()
            )));
        }
        h = next;
    }
    Ok(h)
}

/// Walks every step K..1.
pub fn reverse_full<M: ReverseModel>(
    model: &M,
    start: Vec<Pose3D>,
    schedule: &DiffusionSchedule,
) -> Result<Vec<Pose3D>> {
    let indices = strided_indices(schedule.k_max(), schedule.k_max())?;
    reverse_with_indices(model, start, &indices)
}

/// Walks only `s` strided steps.
pub fn reverse_strided<M: ReverseModel>(
    model: &M,
    start: Vec<Pose3D>,
    schedule: &DiffusionSchedule,
    s: usize,
) -> Result<Vec<Pose3D>> {
    let indices = strided_indices(schedule.k_max(), s)?;
    reverse_with_indices(model, start, &indices)
}

/// Coordinate-wise mean of denoised poses, the final aggregation step.
pub fn aggregate_mean(poses: &[Pose3D]) -> Result<Pose3D> {
    let Some(first) = poses.first() else {
        return Err(Error::invalid("cannot aggregate zero poses"));
    };
    let j = first.joint_count();
    if poses.iter().any(|p| p.joint_count() != j) {
        return Err(Error::invalid("aggregated poses differ in joint count"));
    }
    let inv = 1.0 / poses.len() as f64;
    let mut coords = vec![[0.0f64; 3]; j];
    for p in poses {
        for (acc, c) in coords.iter_mut().zip(p.joints()) {
            for a in 0..3 {
                acc[a] += c[a];
            }
        }
    }
    for c in &mut coords {
        for a in c.iter_mut() {
            *a *= inv;
        }
    }
    Pose3D::new(coords)
}
