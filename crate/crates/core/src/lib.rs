//! Engine for analysing adversarial attacks on CNN classifiers: a small CNN
//! with exact gradients, a PGD attack, and the neuron-level vulnerability
//! measures built on receptive fields, region substitution and
//! activation×weight class bands.

pub mod attack;
pub mod cluster;
pub mod data;
pub mod error;
pub mod image;
pub mod measures;
pub mod nn;
pub mod projection;
pub mod rf;
pub mod store;
pub mod tensor;
pub mod vulnmap;
pub mod workbench;
pub mod workspace;

#[cfg(any(test, feature = "oracles"))]
pub mod testing;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use workbench::Workbench;
