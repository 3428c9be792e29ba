//! Weight-decay mechanisms laboratory: small fully connected networks, exact
//! curvature, SGD/Adam/K-FAC with several weight-decay couplings, and the
//! diagnostics needed to tell those mechanisms apart.

pub mod curvature;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod verify;

pub use error::{Error, Result};
