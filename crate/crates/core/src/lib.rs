//! Desk-scale laboratory for simple random walk on correlated percolation
//! clusters.
//!
//! The crate samples percolation-like configurations (Bernoulli, Gaussian
//! free field level sets, random-interlacement trace surrogates), runs the
//! multi-scale renormalization that classifies boxes as good or bad, builds
//! the perforated "fat set" of good boxes, and numerically probes
//! isoperimetry, heat-kernel decay and diffusive scaling of the lazy walk,
//! including a finite-window corrector estimate.
//!
//! Modules follow the pipeline:
//! lattice -> sampler -> cluster -> renorm -> iso / walk -> harness.

pub mod cluster;
pub mod error;
pub mod harness;
pub mod iso;
pub mod lattice;
pub mod renorm;
pub mod rng;
pub mod sampler;
pub mod walk;

pub use error::{Error, Result};
