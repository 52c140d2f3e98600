//! Grid-based iterative object detection.
//!
//! A fixed multi-scale grid of boxes is moved towards objects by a per-class
//! regressor over several iterations, with a classifier deciding which boxes
//! move and how they are scored. Training splits each box's path to its
//! ground truth into equal steps and adds one step per training stage.

pub mod assign;
pub mod boxgeom;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod features;
pub mod gridgen;
pub mod harness;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
