//! Heatmap-conditioned diffusion for 3D human pose, desk scale.
//!
//! The crate is organized as a pipeline:
//!
//! * [`skeleton`] generates a synthetic corpus: an articulated 17-joint
//!   skeleton, forward kinematics, pinhole projection, heatmap rendering,
//!   and dataset (de)serialization.
//! * [`posedist`] turns per-joint heatmaps and depth histograms into an
//!   uncertain 3D pose distribution, and fits Gaussian mixtures to samples
//!   drawn from it.
//! * [`diffusion`] owns the noise schedule, the mixture-centered forward
//!   process (closed form and step-wise), and the reverse samplers.
//! * [`denoiser`] is the graph-convolutional denoising network plus the
//!   frozen spatio-temporal context encoder.
//! * [`trainer`] wires the above into a training loop with Adam and
//!   checkpointing; [`metrics`] and [`pipeline`] score checkpoints.
//! * [`tensor`] is the small f64 autodiff engine the networks run on.
//!
//! Everything is deterministic: every random decision flows from a single
//! seed through named streams, so re-running any stage reproduces its output
//! byte for byte.

pub mod diffusion;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod posedist;
pub mod rng;
pub mod skeleton;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
