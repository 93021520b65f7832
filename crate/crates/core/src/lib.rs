//! Head-body multi-object tracking.
//!
//! Detections of bodies and heads are paired per frame through learned embeddings,
//! then linked over time by a three-stage cascade (paired records, lone bodies, lone
//! heads) so a pedestrian whose body disappears behind others is carried by the head.
//! The crate also holds the embedding loss used to train such detectors, tiling for very
//! large frames, a synthetic occlusion generator and MOT metrics.
//!
//! The numeric modules are generic over [`num::Scalar`] (`f32` or `f64`); the aliases
//! below fix them to `f64`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod aml;
pub mod assignment;
pub mod cli;
pub mod geometry;
pub mod gigapixel;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod num;
pub mod pairing;
pub mod scenario;
pub mod tracker;

pub type BBox = geometry::BBox<f64>;
pub type CostMatrix = assignment::CostMatrix<f64>;
pub type Assignment = assignment::Assignment<f64>;
pub type LossBatch = aml::LossBatch<f64>;
pub type LossWeights = aml::LossWeights<f64>;
pub type MotionState = motion::MotionState<f64>;
pub type KalmanFilter = motion::KalmanFilter<f64>;
pub type Detection = pairing::Detection<f64>;
pub type PairedDetection = pairing::PairedDetection<f64>;
pub type Track = tracker::Track<f64>;
pub type Tracker = tracker::Tracker<f64>;
pub type TrackerConfig = tracker::TrackerConfig<f64>;
pub type TrackRow = tracker::TrackRow<f64>;
