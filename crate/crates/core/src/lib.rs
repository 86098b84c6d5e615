//! Identification of diffusively coupled linear networks from sampled data.
//!
//! The crate covers the discrete network model, simulation, a multi-step
//! estimator (unstructured ARX, weighted null-space fitting with structural
//! constraints, noise model recovery, component split and return to the
//! continuous domain) and identifiability/topology checks.

pub mod error;
pub mod polymat;
pub mod netmodel;
pub mod simulate;
pub mod arx;
pub mod structured;
pub mod pipeline;

pub use error::{Error, Result};
pub use polymat::PolyMatrix;
