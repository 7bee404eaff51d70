//! Distance-first reconstruction of planar geometry from local, pose-free
//! shape predictions.
//!
//! The crate covers the whole chain: Gram-based supervision targets and
//! losses, EDM residual-diffusion math, locality graphs and patch covers,
//! robust distance stitching, a global Huber distance-geometry solve and an
//! evaluation suite for reconstructed geometry. Oracle predictors in
//! [`synthetic`] stand in for a trained geometry model.

pub mod edm;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod miniset;
pub mod patch_graph;
pub mod pipeline;
pub mod solver;
pub mod stitching;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{CoordinateTable, GeometryFactor, GramMatrix, Mat};
