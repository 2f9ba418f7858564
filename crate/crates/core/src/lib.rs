//! Large and moderate deviations for Gaussian fully connected networks.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod cli;
pub mod conjugate;
pub mod error;
pub mod gauss_expect;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod psd;
pub mod quadrature;
pub mod rates;
pub mod recursion;
pub mod rng;
pub mod shallow;
pub mod simulator;
pub mod value;

pub use activation::Activation;
pub use error::{Error, Result};
pub use model::{InputSet, NetworkConfig, WidthRatios};
pub use psd::{CovMatrix, SymMatrix};
pub use value::RateValue;
