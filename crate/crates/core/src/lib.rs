//! Graph-convolutional fault location for power distribution feeders.
//!
//! The crate is organized as a pipeline:
//!
//! - [`feeder`]: feeder description (buses, phase-wise branches, loads, switches)
//!   with a plain-text line-record format and topology edits.
//! - [`graph`]: shortest-path distances, Kn-nearest Gaussian adjacency, normalized
//!   and scaled Laplacians, hop distances.
//! - [`sim`]: linear three-phase phasor fault simulator and dataset generation.
//! - [`dataset`]: sample matrices, channel standardization, measurement
//!   modifications (noise, bus drop, random loss) and augmentation.
//! - [`nn`]: Chebyshev graph convolution network, FCNN baseline, hand-derived
//!   gradients, Adam, training loop and checkpoints.
//! - [`eval`]: k-hop accuracy metrics and the robustness experiment matrix.
//! - [`oracle`]: independent reference computations (Jacobi eigensolver,
//!   spectral filtering, finite-difference gradients) used by tests and `selfcheck`.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod feeder;
pub mod fixtures;
pub mod graph;
pub mod nn;
pub mod oracle;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
