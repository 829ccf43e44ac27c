//! Multi-view non-rigid 3D reconstruction from 2D keypoints.
//!
//! The crate provides the weak-perspective geometry and OnP solver, a
//! hierarchical sparse neural shape prior with sum pooling across views, a
//! small reverse-mode differentiation engine with Adam for fitting it, a
//! robust multi-view triangulation baseline, synthetic multi-camera data and
//! persistence, and reconstruction metrics.

pub mod error;
pub mod geometry;
pub mod neural_prior;
pub mod data;
pub mod diffengine;
pub mod metrics;
pub mod triangulation;

pub use error::{Error, Result};
pub use geometry::{CameraPose, Keypoints2D, Shape3D};
pub use neural_prior::{DictionaryStack, Reconstruction};
