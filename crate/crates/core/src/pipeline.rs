//! End-to-end inference and evaluation: draw observation-conditioned
//! starting poses, walk the reverse process with a trained denoiser,
//! aggregate the hypotheses, and score the result against ground truth.

use serde::{Deserialize, Serialize};

use crate::denoiser::normalized_adjacency;
use crate::diffusion::{aggregate_mean, make_schedule, reverse_strided};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_poses, MetricReport};
use crate::posedist::UncertainPoseDist;
use crate::rng::{self, tag};
use crate::skeleton::{z_histogram, Dataset, Pose3D};
use crate::trainer::Checkpoint;

/// Inference settings. Step counts below the schedule length run the
/// strided reverse pass; `sample_stride` evaluates every n-th test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Hypotheses drawn and denoised per sample, then averaged.
    pub n_draws: usize,
    /// Reverse steps; equal to the schedule length for the full walk.
    pub steps: usize,
    pub sample_stride: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { n_draws: 5, steps: 50, sample_stride: 1, seed: 0 }
    }
}

impl InferConfig {
    /// Checks the settings against the schedule length they will run under.
    pub fn validate(&self, k_max: usize) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::invalid("inference needs at least one draw per sample"));
        }
        if self.sample_stride == 0 {
            return Err(Error::invalid("sample stride must be positive"));
        }
        if self.steps == 0 || self.steps > k_max {
            return Err(Error::invalid(format!(
                "step count {} outside 1..={k_max}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Final predictions in root-relative millimeters, paired with the test
/// sample ids they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub ids: Vec<usize>,
    pub poses: Vec<Pose3D>,
    pub n_draws: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Translates a pose so its root joint sits at the origin, the frame the
/// ground truth is expressed in.
pub fn reroot(pose: &Pose3D) -> Pose3D {
    let root = pose.joints()[0];
    let coords = pose
        .joints()
        .iter()
        .map(|c| [c[0] - root[0], c[1] - root[1], c[2] - root[2]])
        .collect();
    Pose3D::new(coords).expect("translation keeps coordinates finite")
}

/// Runs the trained model over the dataset's test split.
///
/// Per sample: encode the 2D sequence, draw `n_draws` observation poses
/// from its heatmap/depth distribution, walk them through the reverse
/// process together, average, and map back to millimeters. Draws come
/// from a stream keyed by the sample id, so the starting hypotheses do
/// not depend on the stride or the step count.
pub fn infer(checkpoint: &Checkpoint, dataset: &Dataset, config: &InferConfig) -> Result<Predictions> {
    if dataset.test.is_empty() {
        return Err(Error::invalid("dataset has no test samples"));
    }
    let train_cfg = &checkpoint.config;
    let schedule = make_schedule(train_cfg.k_max, train_cfg.beta_start, train_cfg.beta_end)?;
    config.validate(schedule.k_max())?;
    let adj = normalized_adjacency(&checkpoint.skeleton);
    let zhist = z_histogram(dataset, train_cfg.z_bins)?;

    let mut ids = Vec::new();
    let mut poses = Vec::new();
    for sample in dataset.test.iter().step_by(config.sample_stride) {
        let features = checkpoint.encoder.encode(&adj, &sample.seq2d)?;
        let dist = UncertainPoseDist::new(
            &sample.heatmaps,
            &zhist,
            &checkpoint.camera,
            &checkpoint.norm_stats,
        )?;
        let mut draw_rng = rng::stream(config.seed, tag::HK_INFER, sample.id as u64);
        let start: Vec<Pose3D> =
            (0..config.n_draws).map(|_| dist.sample_hk(&mut draw_rng)).collect();
        let fixed_k = train_cfg.mode.fixed_embedding_step(schedule.k_max());
        let model = |batch: &[Pose3D], k: usize| {
            checkpoint.denoiser.denoise_batch(&adj, batch, &features, fixed_k.unwrap_or(k))
        };
        let denoised = reverse_strided(&model, start, &schedule, config.steps)?;
        let mean = aggregate_mean(&denoised)?;
        poses.push(reroot(&checkpoint.norm_stats.denormalize(&mean)));
        ids.push(sample.id);
    }
    Ok(Predictions {
        ids,
        poses,
        n_draws: config.n_draws,
        steps: config.steps,
        seed: config.seed,
    })
}

/// Scores predictions against the dataset's test split, matching samples
/// by id. Ground truth is rerooted the same way as the predictions.
pub fn evaluate(predictions: &Predictions, dataset: &Dataset) -> Result<MetricReport> {
    if predictions.ids.len() != predictions.poses.len() {
        return Err(Error::invalid("prediction ids and poses disagree in length"));
    }
    let gts: Vec<Pose3D> = predictions
        .ids
        .iter()
        .map(|id| {
            dataset
                .test
                .iter()
                .find(|s| s.id == *id)
                .map(|s| reroot(&s.pose3d))
                .ok_or_else(|| Error::invalid(format!("no test sample with id {id}")))
        })
        .collect::<Result<_>>()?;
    evaluate_poses(&predictions.poses, &gts)
}
