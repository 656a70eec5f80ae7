//! Monocular visual odometry from dense optical flow.
//!
//! The pipeline runs frame pairs through a pyramidal Lucas–Kanade flow
//! engine, splits each flow field into four quadrants, encodes every quadrant
//! with its own two-stage CNN branch refined by channel/spatial attention,
//! and regresses a planar pose increment `(dp, dphi)` from the concatenated
//! features. Increments integrate into KITTI-format trajectories, which the
//! [`eval`] module scores with the usual length- and speed-binned drift
//! statistics.
//!
//! Everything numeric is 64-bit and built on the small reverse-mode tensor
//! core in [`numcore`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod eval;
pub mod exec;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod numcore;
pub mod texture;
pub mod train;

pub use exec::Exec;
