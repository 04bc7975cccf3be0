//! Semi-supervised 2D human pose estimation built from two coupled
//! ("mirrored") variational autoencoders: a pose VAE that scores anatomical
//! plausibility and a pose-conditioned image VAE that scores how faithful an
//! estimated pose is to its source image. An image-to-pose recognizer is
//! trained jointly with both, so images without annotations still contribute
//! gradient signal.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`graph`] — tape-based reverse-mode autodiff over `ndarray`, generic over
//!   `f32`/`f64`.
//! - [`gaussian`] — diagonal Gaussians: log-density, closed-form KL to the
//!   standard normal, reparameterized sampling.
//! - [`heatmap`] — the 16-joint schema and the coordinate ⇄ one-hot heatmap
//!   codec, including the horizontal-flip permutation.
//! - [`nets`] — the seven networks (pose recognizer, appearance/scene/primitive
//!   encoders, image/pose generators, mask estimator).
//! - [`masking`] — foreground/background split driven by the mask estimator.
//! - [`objectives`] — every training objective, each reported term by term.
//! - [`data`] — synthetic stick-figure dataset generation, the on-disk dataset
//!   format, and augmentation.
//! - [`metrics`] — PCK / PCKh keypoint accuracy.
//! - [`train`] — the three-stage curriculum (independent pretraining, joint
//!   supervised, semi-supervised) with checkpointing and metric logs.
//! - [`verify`] — the self-check suite behind the `verify` CLI subcommand.

pub mod data;
pub mod error;
pub mod gaussian;
pub mod graph;
pub mod heatmap;
pub mod masking;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
