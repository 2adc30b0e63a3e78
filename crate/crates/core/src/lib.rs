//! Structure-aware generative modeling of part-based voxel shapes.
//!
//! Shapes are `k` labelled parts, each an occupancy grid inside its own
//! axis-aligned box. Two branches analyze geometry (grids) and structure
//! (pairs of boxes), exchange gated messages for a few recurrent iterations
//! and are fused by a two-input variational autoencoder into one latent
//! code. The decoder splits the code back into per-part grids and
//! per-pair boxes.

pub mod autodiff;
pub mod cli;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod shapes;
pub mod synthjoints;
pub mod tasks;
pub mod training;
