//! Numerical core of a multi-task face detector: anchor pyramid,
//! cross-stitch multi-task head, detection / landmark / pose losses,
//! uncertainty-weighted loss combination, hard negative mining and online
//! feedback sampling, trained on a synthetic scene generator.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix it to `f64`, which is what the trainer uses.

pub mod anchors;
pub mod checkpoint;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod mth;
pub mod numerics;
pub mod pose_codec;
pub mod sampler;
pub mod scalar;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Grid64 = numerics::Grid<f64>;
pub type Grid32 = numerics::Grid<f32>;
pub type BBox64 = geometry::BBox<f64>;
pub type LandmarkSet64 = geometry::LandmarkSet<f64>;
pub type Face64 = geometry::Face<f64>;
pub type AnchorSet64 = anchors::AnchorSet<f64>;
pub type MatchResult64 = anchors::MatchResult<f64>;
pub type Predictions64 = losses::Predictions<f64>;
pub type TaskLosses64 = losses::TaskLosses<f64>;
pub type UmlParams64 = losses::UmlParams<f64>;
pub type HeadParams64 = mth::HeadParams<f64>;
