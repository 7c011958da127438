//! Monocular pedestrian localization from 2D keypoints with an asymmetric
//! distance-uncertainty model, plus a multi-scale temporal relation
//! classifier for frame-feature sequences.
//!
//! The crate is split along the processing pipeline:
//!
//! - [`dist`]: Johnson SU, Gaussian, and Laplace negative log-likelihoods
//!   with analytic gradients, sampling, and quantiles.
//! - [`camera`] / [`skeleton`] / [`synth`]: pinhole projection, keypoint
//!   normalization, a geometric baseline estimator, and a synthetic scene
//!   generator that acts as a ground-truth oracle.
//! - [`dataset`]: KITTI-style label parsing, keypoint record files,
//!   IoU matching, and seeded dataset splits.
//! - [`locnet`]: the keypoint-to-distance network trained with the losses
//!   from [`dist`].
//! - [`trn`]: multi-scale temporal relation network over frame features.
//! - [`eval`]: distance-binned average localization error reports and
//!   loss-comparison experiments.
//!
//! Everything that consumes randomness takes an explicit seed and derives
//! per-sample streams from it, so results are reproducible regardless of
//! thread count. The `parallel` feature (default on) fans data-parallel
//! loops out over rayon; reductions are performed in a fixed order either
//! way, so outputs are byte-identical with the feature on or off.

pub mod camera;
pub mod dataset;
pub mod dist;
pub mod error;
pub mod eval;
pub mod exec;
pub mod locnet;
pub(crate) mod nn;
pub mod skeleton;
pub mod synth;
pub mod trn;

pub use error::{Error, Result};
pub use nn::DenseGrad;
