//! Self-supervised point-cloud representation learning with a segmented
//! embedding and a joint-entropy objective.
//!
//! Pipeline: [`pointcloud`] produces and augments clouds, [`model`] encodes
//! them and projects to a segmented embedding, [`jemloss`] scores the two
//! views, [`train`] optimizes, [`eval`] probes the frozen encoder and
//! [`diagnostics`] measures inter-segment redundancy.

pub mod config;
pub mod diagnostics;
pub mod diffcore;
pub mod eval;
pub mod jemloss;
pub mod model;
pub mod pointcloud;
pub mod seed;
pub mod pipeline;
pub mod train;
