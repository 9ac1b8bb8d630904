//! Scene coordinate regression conditioned on covisibility-consistent global descriptors.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: pinhole cameras, SE(3) poses, reprojection and pose error.
//! * [`numeric`]: PCA, AdamW, k-means and keyed deterministic RNG streams.
//! * [`covis`]: pose-based overlap scores and covisibility graphs.
//! * [`aggregator`]: attention aggregation of dense features into global
//!   descriptors, trained with an overlap-weighted contrastive loss.
//! * [`scr`]: the scene-coordinate regressor, its training buffer and robust
//!   reprojection training.
//! * [`localize`]: retrieval (exact or product-quantized), P3P/RANSAC and
//!   multi-hypothesis localization.
//! * [`synthgen`]: deterministic synthetic scenes with perceptual aliasing.
//! * [`evalkit`]: threshold accuracy tables and retrieval error curves.
//! * [`io`] and [`config`]: binary/text file formats and pipeline configuration.
//! * [`pipeline`]: the end-to-end chain used by the CLI and the acceptance suite.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every result is
//! independent of the thread count.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Indexed loops read closer to the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod aggregator;
pub mod config;
pub mod covis;
pub mod evalkit;
pub mod geometry;
pub mod io;
pub mod localize;
pub mod numeric;
pub mod par;
pub mod pipeline;
pub mod scr;
pub mod synthgen;

pub use covis::ImageId;
pub use geometry::{CameraIntrinsics, Keypoint, Pose, SceneCoordinate};
pub use numeric::RngStream;
