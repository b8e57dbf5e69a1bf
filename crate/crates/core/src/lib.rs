//! Rigid single-view 2D/3D registration driven by point-to-plane
//! correspondences.
//!
//! The engine renders DRRs from a voxel volume, selects contour points among
//! cached surface points, matches them along the projected contour normal
//! against a fluoroscopy gradient image and solves a weighted linear system
//! for an SE(3) increment. Repeating the update until the increment vanishes
//! gives the registration; [`pipeline`] holds the driver and the evaluation
//! metrics.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correspondence;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod ppc;
pub mod projector;
pub mod volume;

pub use error::{Error, Result};
