//! Ensemble subsampling for exponential-family regression with ReLU
//! networks, with bias-corrected infinitesimal-jackknife confidence
//! intervals for the conditional mean.

pub mod cli;
pub mod codec;
pub mod error;
pub mod esm;
pub mod expfam;
pub mod infer;
mod kernels;
pub mod matrix;
pub mod net;
pub mod rng;
pub mod sim;

pub use error::{EsmError, Result};
pub use expfam::FamilySpec;
pub use matrix::Matrix;
pub use net::{Network, NetworkConfig};
