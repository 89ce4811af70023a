//! Uncertainty distributions over 3D poses and their Gaussian-mixture
//! summaries.
//!
//! A pose observation arrives as per-joint heatmaps (x, y evidence) plus
//! per-joint depth histograms (z evidence). Together they induce a
//! distribution over whole poses: [`sample_hk`] draws from it, and
//! [`fit_gmm_em`] condenses a cloud of such draws into a full-covariance
//! Gaussian mixture that the diffusion process is centered on.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{to_normalized, CameraModel, DepthHistograms, Heatmaps, NormStats, Pose3D};
use crate::tensor::{gemm::gemm, Tensor};

// ── Pose distribution ───────────────────────────────────────────────────

/// Distribution over a single sample's 3D pose, assembled from its
/// heatmaps, the training split's depth histograms, and the
/// normalization into diffusion space.
pub struct UncertainPoseDist<'a> {
    heatmaps: &'a Heatmaps,
    z: &'a DepthHistograms,
    /// Millimeters per normalized image unit at each joint's mean
    /// histogram depth; fixes the back-projection to a linear map so the
    /// x, y distribution stays exactly proportional to the heatmap.
    xy_scale_mm: Vec<f64>,
    norm: NormStats,
}

impl<'a> UncertainPoseDist<'a> {
    pub fn new(
        heatmaps: &'a Heatmaps,
        z: &'a DepthHistograms,
        camera: &CameraModel,
        norm: &NormStats,
    ) -> Result<Self> {
        if heatmaps.joint_count() != z.joints.len() {
            return Err(Error::invalid(format!(
                "heatmaps cover {} joints but depth histograms cover {}",
                heatmaps.joint_count(),
                z.joints.len()
            )));
        }
        let xy_scale_mm = z
            .joints
            .iter()
            .map(|h| camera.half_size_px * (camera.root_depth_mm + h.mean()) / camera.focal_px)
            .collect();
        Ok(UncertainPoseDist {
            heatmaps,
            z,
            xy_scale_mm,
            norm: *norm,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.heatmaps.joint_count()
    }

    /// Draws one pose in normalized diffusion space. Per joint: a heatmap
    /// cell proportional to its weight plus uniform sub-pixel jitter gives
    /// x and y; a depth bin proportional to its frequency plus uniform
    /// in-bin jitter gives z.
    pub fn sample_hk<R: Rng>(&self, rng: &mut R) -> Pose3D {
        let j = self.joint_count();
        let mut coords = Vec::with_capacity(j);
        for joint in 0..j {
            let hm = self.heatmaps.joint(joint);
            let u: f64 = rng.gen_range(0.0..1.0);
            let cell = choose_by_weight(hm.cells().iter().map(|&(_, w)| w), u);
            let (px, py) = hm.cell_xy(hm.cells()[cell].0);
            let jx: f64 = rng.gen_range(-0.5..0.5);
            let jy: f64 = rng.gen_range(-0.5..0.5);
            let ux = to_normalized(px as f64 + jx, hm.size());
            let vy = to_normalized(py as f64 + jy, hm.size());
            let x_mm = ux * self.xy_scale_mm[joint];
            let y_mm = vy * self.xy_scale_mm[joint];

            let zh = &self.z.joints[joint];
            let uz: f64 = rng.gen_range(0.0..1.0);
            let bin = choose_by_weight(zh.freqs.iter().copied(), uz);
            let jz: f64 = rng.gen_range(0.0..1.0);
            let lo = zh.edges[bin];
            let hi = zh.edges[bin + 1];
            let z_mm = lo + jz * (hi - lo);

            coords.push([
                (x_mm - self.norm.mean[0]) / self.norm.std[0],
                (y_mm - self.norm.mean[1]) / self.norm.std[1],
                (z_mm - self.norm.mean[2]) / self.norm.std[2],
            ]);
        }
        Pose3D::new(coords).expect("sampled coordinates are finite")
    }

    /// Draws `n` poses as rows of an n x 3J matrix, the layout consumed by
    /// mixture fitting.
    pub fn sample_hk_many<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("must draw at least one sample"));
        }
        let d = 3 * self.joint_count();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.sample_hk(rng).flat());
        }
        Tensor::new(&[n, d], data)
    }
}

/// Picks the first index whose cumulative weight exceeds `u * total`.
/// Weights need not be normalized; `u` must lie in [0, 1).
fn choose_by_weight<I: Iterator<Item = f64> + Clone>(weights: I, u: f64) -> usize {
    let total: f64 = weights.clone().sum();
    let target = u * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        cum += w;
        last = i;
        if cum > target {
            return i;
        }
    }
    last
}

// ── Gaussian mixture model ──────────────────────────────────────────────

/// Full-covariance Gaussian mixture over flattened poses.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GmmParams {
    pub dim: usize,
    /// Component weights, non-negative, summing to 1 within 1e-9.
    pub weights: Vec<f64>,
    /// Component means, each of length `dim`.
    pub means: Vec<Vec<f64>>,
    /// Component covariances, each a row-major `dim` x `dim` matrix.
    pub covs: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn new(
        dim: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || covs.len() != m {
            return Err(Error::invalid("mixture component counts disagree"));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights must be non-negative and sum to 1, got sum {sum}"
            )));
        }
        for (i, (mu, cov)) in means.iter().zip(&covs).enumerate() {
            if mu.len() != dim || cov.len() != dim * dim {
                return Err(Error::invalid(format!("component {i} has wrong dimensions")));
            }
            if !mu.iter().chain(cov.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("mixture component {i}"),
                });
            }
        }
        Ok(GmmParams {
            dim,
            weights,
            means,
            covs,
        })
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }
}

/// Result of an EM fit: the mixture, the mean log-likelihood after each
/// iteration, and how many collapsed components were re-initialized.
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Mean log-likelihood per EM iteration, non-decreasing up to
    /// floating-point noise.
    pub ll_trace: Vec<f64>,
    pub reinit_count: usize,
}

/// EM fitting controls.
#[derive(Clone, Copy, Debug)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    /// Diagonal ridge as a fraction of mean variance, added to every
    /// covariance update.
    pub ridge_scale: f64,
    /// Lloyd refinement steps after k-means++ seeding.
    pub kmeans_iters: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 100,
            tol: 1e-6,
            ridge_scale: 1e-6,
            kmeans_iters: 5,
        }
    }
}

/// In-place lower Cholesky factorization of a row-major `d` x `d` matrix.
/// Only the lower triangle of the result is meaningful.
fn cholesky(a: &mut [f64], d: usize) -> Result<()> {
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::NotPositiveDefinite {
                        context: format!("pivot {i} in Cholesky factorization"),
                    });
                }
                a[i * d + i] = s.sqrt();
            } else {
                a[i * d + j] = s / a[j * d + j];
            }
        }
    }
    Ok(())
}

/// Log density of N(mu, Sigma) at each row of `x`, given the lower
/// Cholesky factor of Sigma. Appends into `out`.
fn gaussian_log_density(
    x: &[f64],
    n: usize,
    d: usize,
    mu: &[f64],
    chol: &[f64],
    out: &mut [f64],
) {
    let mut log_det = 0.0;
    for i in 0..d {
        log_det += chol[i * d + i].ln();
    }
    let base = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - log_det;
    let mut w = vec![0.0; d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        // forward substitution: L w = row - mu
        let mut q = 0.0;
        for i in 0..d {
            let mut s = row[i] - mu[i];
            for k in 0..i {
                s -= chol[i * d + k] * w[k];
            }
            let wi = s / chol[i * d + i];
            w[i] = wi;
            q += wi * wi;
        }
        out[r] = base - 0.5 * q;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Total log-likelihood of all rows of `samples` under the mixture,
/// computed with log-sum-exp across components.
pub fn gmm_log_likelihood(params: &GmmParams, samples: &Tensor) -> Result<f64> {
    let (n, d) = (samples.rows(), samples.cols());
    if d != params.dim {
        return Err(Error::invalid(format!(
            "samples have dimension {d} but mixture has {}",
            params.dim
        )));
    }
    let m = params.component_count();
    let mut logp = vec![0.0; n * m];
    let mut buf = vec![0.0; n];
    for c in 0..m {
        let mut chol = params.covs[c].clone();
        cholesky(&mut chol, d)?;
        gaussian_log_density(samples.data(), n, d, &params.means[c], &chol, &mut buf);
        let lw = params.weights[c].max(f64::MIN_POSITIVE).ln();
        for r in 0..n {
            logp[r * m + c] = buf[r] + lw;
        }
    }
    let mut total = 0.0;
    for r in 0..n {
        total += log_sum_exp(&logp[r * m..(r + 1) * m]);
    }
    Ok(total)
}

/// k-means++ seeding followed by a few Lloyd iterations; returns the
/// cluster assignment of every row.
fn kmeans<R: Rng>(x: &[f64], n: usize, d: usize, m: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let mut centers = vec![0.0; m * d];
    let first = rng.gen_range(0..n);
    centers[..d].copy_from_slice(&x[first * d..(first + 1) * d]);
    let mut dist2 = vec![0.0; n];
    for c in 1..m {
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mut best = f64::INFINITY;
            for k in 0..c {
                let ck = &centers[k * d..(k + 1) * d];
                let mut s = 0.0;
                for i in 0..d {
                    let t = row[i] - ck[i];
                    s += t * t;
                }
                best = best.min(s);
            }
            dist2[r] = best;
        }
        let u: f64 = rng.gen_range(0.0..1.0);
        let pick = choose_by_weight(dist2.iter().copied(), u);
        centers[c * d..(c + 1) * d].copy_from_slice(&x[pick * d..(pick + 1) * d]);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters.max(1) {
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..m {
                let ck = &centers[k * d..(k + 1) * d];
                let mut s = 0.0;
                for i in 0..d {
                    let t = row[i] - ck[i];
                    s += t * t;
                }
                if s < best.0 {
                    best = (s, k);
                }
            }
            assign[r] = best.1;
        }
        let mut counts = vec![0usize; m];
        let mut sums = vec![0.0; m * d];
        for r in 0..n {
            let k = assign[r];
            counts[k] += 1;
            for i in 0..d {
                sums[k * d + i] += x[r * d + i];
            }
        }
        for k in 0..m {
            if counts[k] == 0 {
                let pick = rng.gen_range(0..n);
                centers[k * d..(k + 1) * d].copy_from_slice(&x[pick * d..(pick + 1) * d]);
            } else {
                for i in 0..d {
                    centers[k * d + i] = sums[k * d + i] / counts[k] as f64;
                }
            }
        }
    }
    assign
}

/// Per-dimension variance of the data plus ridge, used as a fallback
/// covariance when a component collapses.
fn global_diag_cov(x: &[f64], n: usize, d: usize, ridge_scale: f64) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for i in 0..d {
            mean[i] += x[r * d + i];
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for i in 0..d {
            let t = x[r * d + i] - mean[i];
            var[i] += t * t;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    let trace: f64 = var.iter().sum();
    let ridge = (ridge_scale * trace / d as f64).max(f64::MIN_POSITIVE);
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        cov[i * d + i] = var[i] + ridge;
    }
    cov
}

/// Weight below which a component counts as collapsed.
const COLLAPSE_WEIGHT: f64 = 1e-4;

struct EmState {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<f64>>,
}

/// Fits an `m`-component full-covariance mixture to the rows of `samples`
/// by expectation-maximization, seeded with k-means++.
///
/// Requires at least 10 samples per component. Collapsed components are
/// re-initialized from a random data row with the global diagonal
/// covariance, and each such event is counted in the returned fit.
pub fn fit_gmm_em<R: Rng>(
    samples: &Tensor,
    m: usize,
    opts: &EmOptions,
    rng: &mut R,
) -> Result<GmmFit> {
    let (n, d) = (samples.rows(), samples.cols());
    if m == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    if n < 10 * m {
        return Err(Error::invalid(format!(
            "{n} samples are too few for {m} components (need at least {})",
            10 * m
        )));
    }
    let x = samples.data();
    let fallback_cov = global_diag_cov(x, n, d, opts.ridge_scale);

    // seed from k-means clusters
    let assign = kmeans(x, n, d, m, opts.kmeans_iters, rng);
    let mut st = EmState {
        weights: vec![0.0; m],
        means: vec![vec![0.0; d]; m],
        covs: vec![vec![0.0; d * d]; m],
    };
    let mut reinit_count = 0usize;
    for c in 0..m {
        let rows: Vec<usize> = (0..n).filter(|&r| assign[r] == c).collect();
        if rows.len() < 2 {
            reinit_component(&mut st, c, m, x, n, d, &fallback_cov, rng);
            reinit_count += 1;
            continue;
        }
        st.weights[c] = rows.len() as f64 / n as f64;
        for &r in &rows {
            for i in 0..d {
                st.means[c][i] += x[r * d + i];
            }
        }
        for v in &mut st.means[c] {
            *v /= rows.len() as f64;
        }
        let mut cov = vec![0.0; d * d];
        for &r in &rows {
            for i in 0..d {
                let di = x[r * d + i] - st.means[c][i];
                for j in 0..=i {
                    cov[i * d + j] += di * (x[r * d + j] - st.means[c][j]);
                }
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] *= inv;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        add_ridge(&mut cov, d, opts.ridge_scale);
        st.covs[c] = cov;
    }
    let wsum: f64 = st.weights.iter().sum();
    for w in &mut st.weights {
        *w /= wsum;
    }

    let mut ll_trace = Vec::new();
    let mut logp = vec![0.0; n * m];
    let mut buf = vec![0.0; n];
    let mut resp = vec![0.0; n * m];
    let mut weighted = vec![0.0; n * d];

    for _iter in 0..opts.max_iters {
        // E-step; a component whose covariance lost positive definiteness
        // is re-seeded before densities are evaluated
        for c in 0..m {
            loop {
                let mut chol = st.covs[c].clone();
                match cholesky(&mut chol, d) {
                    Ok(()) => {
                        gaussian_log_density(x, n, d, &st.means[c], &chol, &mut buf);
                        let lw = st.weights[c].max(f64::MIN_POSITIVE).ln();
                        for r in 0..n {
                            logp[r * m + c] = buf[r] + lw;
                        }
                        break;
                    }
                    Err(_) => {
                        reinit_component(&mut st, c, m, x, n, d, &fallback_cov, rng);
                        reinit_count += 1;
                    }
                }
            }
        }
        let mut total = 0.0;
        for r in 0..n {
            let row = &logp[r * m..(r + 1) * m];
            let lse = log_sum_exp(row);
            total += lse;
            for c in 0..m {
                resp[r * m + c] = (row[c] - lse).exp();
            }
        }
        let mean_ll = total / n as f64;
        let done = ll_trace
            .last()
            .is_some_and(|&prev: &f64| mean_ll - prev < opts.tol);
        ll_trace.push(mean_ll);
        if done {
            break;
        }

        // M-step
        for c in 0..m {
            let nk: f64 = (0..n).map(|r| resp[r * m + c]).sum();
            let w = nk / n as f64;
            if !(w > COLLAPSE_WEIGHT) {
                reinit_component(&mut st, c, m, x, n, d, &fallback_cov, rng);
                reinit_count += 1;
                continue;
            }
            st.weights[c] = w;
            let mut mu = vec![0.0; d];
            for r in 0..n {
                let g = resp[r * m + c];
                for i in 0..d {
                    mu[i] += g * x[r * d + i];
                }
            }
            for v in &mut mu {
                *v /= nk;
            }
            // scatter of sqrt(resp)-weighted centered rows
            for r in 0..n {
                let g = resp[r * m + c].sqrt();
                for i in 0..d {
                    weighted[r * d + i] = g * (x[r * d + i] - mu[i]);
                }
            }
            let mut cov = vec![0.0; d * d];
            gemm(d, n, d, 1.0 / nk, &weighted, true, &weighted, false, 0.0, &mut cov);
            // restore exact symmetry lost to accumulation order
            for i in 0..d {
                for j in 0..i {
                    let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                    cov[i * d + j] = s;
                    cov[j * d + i] = s;
                }
            }
            add_ridge(&mut cov, d, opts.ridge_scale);
            st.means[c] = mu;
            st.covs[c] = cov;
        }
        let wsum: f64 = st.weights.iter().sum();
        for w in &mut st.weights {
            *w /= wsum;
        }
    }

    Ok(GmmFit {
        params: GmmParams::new(d, st.weights, st.means, st.covs)?,
        ll_trace,
        reinit_count,
    })
}

fn add_ridge(cov: &mut [f64], d: usize, ridge_scale: f64) {
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let ridge = (ridge_scale * trace / d as f64).max(f64::MIN_POSITIVE);
    for i in 0..d {
        cov[i * d + i] += ridge;
    }
}

fn reinit_component<R: Rng>(
    st: &mut EmState,
    c: usize,
    m: usize,
    x: &[f64],
    n: usize,
    d: usize,
    fallback_cov: &[f64],
    rng: &mut R,
) {
    let pick = rng.gen_range(0..n);
    st.means[c] = x[pick * d..(pick + 1) * d].to_vec();
    st.covs[c] = fallback_cov.to_vec();
    st.weights[c] = 1.0 / m as f64;
    let wsum: f64 = st.weights.iter().sum();
    for w in &mut st.weights {
        *w /= wsum;
    }
}

// ── Sampling from a mixture ─────────────────────────────────────────────

/// Prepared sampler: per component, the mean and the symmetric square
/// root of the covariance, so draws are mean + S * eps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmSampler {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major symmetric square roots of the component covariances.
    sqrt_factors: Vec<Vec<f64>>,
}

impl GmmSampler {
    /// Builds the sampler by symmetric eigendecomposition of each
    /// covariance. Eigenvalues below a tiny negative threshold reject the
    /// component as not positive semi-definite.
    pub fn new(params: &GmmParams) -> Result<Self> {
        let d = params.dim;
        let mut sqrt_factors = Vec::with_capacity(params.component_count());
        for (c, cov) in params.covs.iter().enumerate() {
            let mat = DMatrix::from_row_slice(d, d, cov);
            let eig = mat.symmetric_eigen();
            let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let floor = -1e-9 * max_ev.max(1.0);
            let mut factor = DMatrix::zeros(d, d);
            for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev < floor {
                    return Err(Error::NotPositiveDefinite {
                        context: format!("eigenvalue {ev} of mixture component {c}"),
                    });
                }
                let s = ev.max(0.0).sqrt();
                let v = eig.eigenvectors.column(i);
                // rank-one accumulation of V sqrt(L) V^T
                for a in 0..d {
                    for b in 0..d {
                        factor[(a, b)] += s * v[a] * v[b];
                    }
                }
            }
            sqrt_factors.push(factor.transpose().as_slice().to_vec());
        }
        Ok(GmmSampler {
            dim: d,
            weights: params.weights.clone(),
            means: params.means.clone(),
            sqrt_factors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, c: usize) -> f64 {
        self.weights[c]
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    pub fn sqrt_factor(&self, c: usize) -> &[f64] {
        &self.sqrt_factors[c]
    }

    /// Picks a component index proportional to the mixture weights.
    pub fn draw_component<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen_range(0.0..1.0);
        choose_by_weight(self.weights.iter().copied(), u)
    }

    /// Draws zero-mean noise with component `c`'s covariance.
    pub fn draw_noise<R: Rng>(&self, c: usize, rng: &mut R) -> Vec<f64> {
        let d = self.dim;
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let s = &self.sqrt_factors[c];
        let mut out = vec![0.0; d];
        for i in 0..d {
            let row = &s[i * d..(i + 1) * d];
            out[i] = row.iter().zip(&eps).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Draws one sample from the full mixture, returning the chosen
    /// component and the sample.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let c = self.draw_component(rng);
        let mut v = self.draw_noise(c, rng);
        for (vi, mi) in v.iter_mut().zip(&self.means[c]) {
            *vi += mi;
        }
        (c, v)
    }
}

/// Draws `n` mixture samples as rows of an n x dim matrix.
pub fn sample_gmm<R: Rng>(sampler: &GmmSampler, n: usize, rng: &mut R) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("must draw at least one sample"));
    }
    let d = sampler.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(sampler.draw(rng).1);
    }
    Tensor::new(&[n, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::skeleton::{Heatmap, Histogram};
    use approx::assert_abs_diff_eq;

    fn point_mass_dist() -> (Heatmaps, DepthHistograms, CameraModel, NormStats) {
        let idx = 20u32 * 64 + 40; // pixel (40, 20)
        let heatmaps = Heatmaps::new(vec![Heatmap::new(64, vec![(idx, 1.0)]).unwrap()]).unwrap();
        let z = DepthHistograms {
            joints: vec![Histogram {
                edges: vec![120.0, 120.0],
                freqs: vec![1.0],
            }],
        };
        let norm = NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        (heatmaps, z, CameraModel::default(), norm)
    }

    #[test]
    fn point_mass_heatmap_back_projects_within_one_pixel() {
        let (hm, z, cam, norm) = point_mass_dist();
        let dist = UncertainPoseDist::new(&hm, &z, &cam, &norm).unwrap();
        let scale = cam.half_size_px * (cam.root_depth_mm + 120.0) / cam.focal_px;
        let cx = to_normalized(40.0, 64) * scale;
        let cy = to_normalized(20.0, 64) * scale;
        let px_mm = 2.0 / 63.0 * scale; // one pixel in millimeters
        let mut r = rng::stream(0, 0x41, 0);
        for _ in 0..200 {
            let p = dist.sample_hk(&mut r);
            let c = p.joint(0);
            assert!((c[0] - cx).abs() <= 0.5 * px_mm + 1e-12);
            assert!((c[1] - cy).abs() <= 0.5 * px_mm + 1e-12);
            assert_eq!(c[2], 120.0);
        }
    }

    #[test]
    fn sample_mean_matches_heatmap_centroid() {
        // two-cell heatmap: empirical mean within 3 standard errors of the
        // centroid's back-projection
        let cells = vec![(10u32 * 64 + 10, 0.25), (30u32 * 64 + 50, 0.75)];
        let hm = Heatmaps::new(vec![Heatmap::new(64, cells).unwrap()]).unwrap();
        let (_, z, cam, norm) = point_mass_dist();
        let dist = UncertainPoseDist::new(&hm, &z, &cam, &norm).unwrap();
        let scale = cam.half_size_px * (cam.root_depth_mm + 120.0) / cam.focal_px;
        let (cx, cy) = hm.joint(0).centroid();
        let ex = to_normalized(cx, 64) * scale;
        let ey = to_normalized(cy, 64) * scale;
        let n = 10_000;
        let mut r = rng::stream(1, 0x41, 1);
        let (mut sx, mut sy, mut qx, mut qy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let c = dist.sample_hk(&mut r).joint(0);
            sx += c[0];
            sy += c[1];
            qx += c[0] * c[0];
            qy += c[1] * c[1];
        }
        let nf = n as f64;
        let (mx, my) = (sx / nf, sy / nf);
        let se_x = ((qx / nf - mx * mx) / nf).sqrt();
        let se_y = ((qy / nf - my * my) / nf).sqrt();
        assert!((mx - ex).abs() < 3.0 * se_x, "x mean {mx} vs {ex}");
        assert!((my - ey).abs() < 3.0 * se_y, "y mean {my} vs {ey}");
    }

    #[test]
    fn uniform_two_bin_depth_splits_evenly() {
        let (hm, _, cam, norm) = point_mass_dist();
        let z = DepthHistograms {
            joints: vec![Histogram {
                edges: vec![0.0, 50.0, 100.0],
                freqs: vec![0.5, 0.5],
            }],
        };
        let dist = UncertainPoseDist::new(&hm, &z, &cam, &norm).unwrap();
        let mut r = rng::stream(2, 0x41, 2);
        let n = 10_000;
        let upper = (0..n)
            .filter(|_| dist.sample_hk(&mut r).joint(0)[2] >= 50.0)
            .count();
        let frac = upper as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "upper-bin fraction {frac}");
    }

    #[test]
    fn normalization_is_applied_to_samples() {
        let (hm, z, cam, _) = point_mass_dist();
        let norm = NormStats {
            mean: [10.0, -5.0, 100.0],
            std: [2.0, 4.0, 8.0],
        };
        let dist = UncertainPoseDist::new(&hm, &z, &cam, &norm).unwrap();
        let mut r = rng::stream(3, 0x41, 3);
        let c = dist.sample_hk(&mut r).joint(0);
        assert_abs_diff_eq!(c[2], (120.0 - 100.0) / 8.0, epsilon = 1e-12);
    }

    fn spd(d: usize, seed: u64) -> Vec<f64> {
        // A A^T + I is strictly positive definite
        let mut r = rng::stream(seed, 0x42, 0);
        let a: Vec<f64> = (0..d * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..d {
                    s += a[i * d + k] * a[j * d + k];
                }
                out[i * d + j] = s;
            }
        }
        out
    }

    #[test]
    fn log_likelihood_at_mean_of_unit_gaussian() {
        for d in [1usize, 3, 7] {
            let mut cov = vec![0.0; d * d];
            for i in 0..d {
                cov[i * d + i] = 1.0;
            }
            let gmm = GmmParams::new(d, vec![1.0], vec![vec![0.0; d]], vec![cov]).unwrap();
            let x = Tensor::new(&[1, d], vec![0.0; d]).unwrap();
            let ll = gmm_log_likelihood(&gmm, &x).unwrap();
            let want = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
            assert_abs_diff_eq!(ll, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn duplicating_a_sample_doubles_total_log_likelihood() {
        let d = 4;
        let gmm = GmmParams::new(
            d,
            vec![0.3, 0.7],
            vec![vec![0.5; d], vec![-0.5; d]],
            vec![spd(d, 1), spd(d, 2)],
        )
        .unwrap();
        let row: Vec<f64> = (0..d).map(|i| 0.1 * i as f64).collect();
        let one = Tensor::new(&[1, d], row.clone()).unwrap();
        let two = Tensor::new(&[2, d], [row.clone(), row].concat()).unwrap();
        let a = gmm_log_likelihood(&gmm, &one).unwrap();
        let b = gmm_log_likelihood(&gmm, &two).unwrap();
        assert_abs_diff_eq!(b, 2.0 * a, epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_matches_naive_direct_sum() {
        // well-scaled case where the plain sum of weighted densities is
        // numerically safe
        let d = 3;
        let gmm = GmmParams::new(
            d,
            vec![0.4, 0.6],
            vec![vec![0.0, 1.0, -1.0], vec![2.0, -2.0, 0.5]],
            vec![spd(d, 3), spd(d, 4)],
        )
        .unwrap();
        let mut r = rng::stream(5, 0x43, 0);
        let n = 40;
        let data: Vec<f64> = (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let x = Tensor::new(&[n, d], data.clone()).unwrap();
        let fast = gmm_log_likelihood(&gmm, &x).unwrap();

        let mut naive = 0.0;
        for row in data.chunks(d) {
            let mut p = 0.0;
            for c in 0..2 {
                let mut chol = gmm.covs[c].clone();
                cholesky(&mut chol, d).unwrap();
                let mut buf = [0.0];
                gaussian_log_density(row, 1, d, &gmm.means[c], &chol, &mut buf);
                p += gmm.weights[c] * buf[0].exp();
            }
            naive += p.ln();
        }
        assert_abs_diff_eq!(fast, naive, epsilon = 1e-9);
    }

    #[test]
    fn non_positive_definite_covariance_is_rejected() {
        let d = 2;
        let cov = vec![1.0, 2.0, 2.0, 1.0]; // eigenvalues 3 and -1
        let gmm = GmmParams::new(d, vec![1.0], vec![vec![0.0; d]], vec![cov]).unwrap();
        let x = Tensor::new(&[1, d], vec![0.0; d]).unwrap();
        assert!(matches!(
            gmm_log_likelihood(&gmm, &x),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(matches!(
            GmmSampler::new(&gmm),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    fn gaussian_cloud(n: usize, d: usize, mu: &[f64], scale: f64, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0x44, 0);
        (0..n)
            .flat_map(|_| {
                (0..d)
                    .map(|i| mu[i] + scale * rng_normal(&mut r))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn rng_normal<R: Rng>(r: &mut R) -> f64 {
        r.sample(StandardNormal)
    }

    #[test]
    fn single_component_fit_is_closed_form_mean_and_covariance() {
        let (n, d) = (50, 3);
        let data = gaussian_cloud(n, d, &[1.0, -2.0, 0.5], 0.7, 10);
        let x = Tensor::new(&[n, d], data.clone()).unwrap();
        let mut r = rng::stream(11, 0x45, 0);
        let fit = fit_gmm_em(&x, 1, &EmOptions::default(), &mut r).unwrap();
        assert_eq!(fit.params.weights, vec![1.0]);

        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            for i in 0..d {
                mean[i] += row[i];
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for row in data.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        for v in &mut cov {
            *v /= n as f64;
        }
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        for i in 0..d {
            cov[i * d + i] += 1e-6 * trace / d as f64;
        }
        for i in 0..d {
            assert_abs_diff_eq!(fit.params.means[0][i], mean[i], epsilon = 1e-9);
        }
        for i in 0..d * d {
            assert_abs_diff_eq!(fit.params.covs[0][i], cov[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn two_separated_clusters_are_recovered() {
        let (n, d) = (200, 2);
        let mut data = gaussian_cloud(n, d, &[10.0, 10.0], 1.0, 12);
        data.extend(gaussian_cloud(n, d, &[-10.0, -10.0], 1.0, 13));
        let x = Tensor::new(&[2 * n, d], data).unwrap();
        let mut r = rng::stream(14, 0x45, 1);
        let fit = fit_gmm_em(&x, 2, &EmOptions::default(), &mut r).unwrap();
        let mut order: Vec<usize> = vec![0, 1];
        order.sort_by(|&a, &b| fit.params.means[a][0].total_cmp(&fit.params.means[b][0]));
        let lo = &fit.params.means[order[0]];
        let hi = &fit.params.means[order[1]];
        for i in 0..d {
            assert!((lo[i] + 10.0).abs() < 0.1, "low mean {lo:?}");
            assert!((hi[i] - 10.0).abs() < 0.1, "high mean {hi:?}");
        }
        for &w in &fit.params.weights {
            assert!((w - 0.5).abs() < 0.05, "weight {w}");
        }
    }

    #[test]
    fn em_trace_is_monotone_within_slack() {
        for run in 0..10u64 {
            let mut r = rng::stream(run, 0x46, 0);
            let n = 200;
            let d = 6;
            let data: Vec<f64> = (0..n * d)
                .map(|i| {
                    let c = (i / d) % 3;
                    c as f64 * 2.0 + rng_normal(&mut r)
                })
                .collect();
            let x = Tensor::new(&[n, d], data).unwrap();
            let fit = fit_gmm_em(&x, 3, &EmOptions::default(), &mut r).unwrap();
            for w in fit.ll_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9,
                    "run {run}: trace decreased from {} to {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn known_mixture_is_recovered_and_likelihood_is_matched() {
        let d = 3;
        let mut cov1 = vec![0.0; d * d];
        let mut cov2 = vec![0.0; d * d];
        for i in 0..d {
            cov1[i * d + i] = 0.5;
            cov2[i * d + i] = 0.8;
        }
        let truth = GmmParams::new(
            d,
            vec![0.35, 0.65],
            vec![vec![6.0, 0.0, -6.0], vec![-6.0, 3.0, 6.0]],
            vec![cov1, cov2],
        )
        .unwrap();
        let sampler = GmmSampler::new(&truth).unwrap();
        let mut r = rng::stream(20, 0x47, 0);
        let x = sample_gmm(&sampler, 2000, &mut r).unwrap();
        let fit = fit_gmm_em(&x, 2, &EmOptions::default(), &mut r).unwrap();

        let mut order: Vec<usize> = vec![0, 1];
        order.sort_by(|&a, &b| fit.params.means[a][0].total_cmp(&fit.params.means[b][0]));
        let got_w = [fit.params.weights[order[1]], fit.params.weights[order[0]]];
        assert!((got_w[0] - 0.35).abs() < 0.05);
        assert!((got_w[1] - 0.65).abs() < 0.05);
        for (c, want) in [(order[1], &truth.means[0]), (order[0], &truth.means[1])] {
            for i in 0..d {
                assert!(
                    (fit.params.means[c][i] - want[i]).abs() < 0.1,
                    "mean {c} axis {i}: {} vs {}",
                    fit.params.means[c][i],
                    want[i]
                );
            }
        }
        let ll_truth = gmm_log_likelihood(&truth, &x).unwrap();
        let ll_fit = gmm_log_likelihood(&fit.params, &x).unwrap();
        assert!(
            (ll_fit - ll_truth).abs() <= 0.01 * ll_truth.abs(),
            "fit LL {ll_fit} vs generator LL {ll_truth}"
        );
    }

    #[test]
    fn too_few_samples_per_component_is_rejected() {
        let x = Tensor::new(&[19, 2], vec![0.5; 38]).unwrap();
        let mut r = rng::stream(0, 0x48, 0);
        assert!(fit_gmm_em(&x, 2, &EmOptions::default(), &mut r).is_err());
    }

    #[test]
    fn sampler_component_occupancy_follows_weights() {
        let d = 2;
        let mut cov = vec![0.0; d * d];
        cov[0] = 1.0;
        cov[3] = 1.0;
        let gmm = GmmParams::new(
            d,
            vec![0.2, 0.8],
            vec![vec![0.0; d], vec![5.0; d]],
            vec![cov.clone(), cov],
        )
        .unwrap();
        let sampler = GmmSampler::new(&gmm).unwrap();
        let mut r = rng::stream(21, 0x49, 0);
        let n = 10_000;
        let hits = (0..n).filter(|_| sampler.draw(&mut r).0 == 0).count();
        let frac = hits as f64 / n as f64;
        let se = (0.2f64 * 0.8 / n as f64).sqrt();
        assert!((frac - 0.2).abs() < 3.0 * se, "occupancy {frac}");
    }

    #[test]
    fn sampler_covariance_matches_component_covariance() {
        let d = 3;
        let cov = spd(d, 30);
        let mu = vec![1.0, -1.0, 2.0];
        let gmm = GmmParams::new(d, vec![1.0], vec![mu.clone()], vec![cov.clone()]).unwrap();
        let sampler = GmmSampler::new(&gmm).unwrap();
        let mut r = rng::stream(22, 0x49, 1);
        let n = 20_000;
        let x = sample_gmm(&sampler, n, &mut r).unwrap();
        let data = x.data();
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            for i in 0..d {
                mean[i] += row[i];
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        let mut emp = vec![0.0; d * d];
        for row in data.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    emp[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        for v in &mut emp {
            *v /= n as f64;
        }
        for i in 0..d {
            for j in 0..d {
                let se = ((cov[i * d + i] * cov[j * d + j] + cov[i * d + j].powi(2))
                    / n as f64)
                    .sqrt();
                assert!(
                    (emp[i * d + j] - cov[i * d + j]).abs() < 3.0 * se,
                    "cov[{i},{j}] {} vs {}",
                    emp[i * d + j],
                    cov[i * d + j]
                );
            }
        }
    }

    #[test]
    fn em_is_deterministic_given_the_rng_stream() {
        let d = 4;
        let data = gaussian_cloud(300, d, &[0.0; 4], 1.0, 40);
        let x = Tensor::new(&[300, d], data).unwrap();
        let fit_a = fit_gmm_em(&x, 3, &EmOptions::default(), &mut rng::stream(7, 0x4a, 0)).unwrap();
        let fit_b = fit_gmm_em(&x, 3, &EmOptions::default(), &mut rng::stream(7, 0x4a, 0)).unwrap();
        assert_eq!(fit_a.params, fit_b.params);
        assert_eq!(fit_a.ll_trace, fit_b.ll_trace);
    }
}
