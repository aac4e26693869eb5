//! 2D object detection in sparse automotive radar point clouds.
//!
//! A radar measurement cycle yields a handful of reflections (position,
//! ego-motion-compensated Doppler, RCS). This crate turns such point clouds
//! into classified, amodal 2D bounding boxes: a patch proposal stage, a
//! point-network patch classifier / per-point segmenter, and a box
//! regression network, plus a synthetic scene generator, the multi-task
//! training loop and an evaluation harness.

pub mod boxes;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod patches;
pub mod seeds;
pub mod sim;
pub mod tape;
pub mod train;
pub mod types;

pub use error::{Error, Result};
