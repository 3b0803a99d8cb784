//! Linear-quadratic control of stochastic Volterra equations through
//! finite exponential-factor lifts of the kernel.

pub mod converge;
pub mod error;
pub mod kernels;
pub mod liftlq;
pub mod montecarlo;
pub mod policy;
pub mod quad;
pub mod riccati;
pub mod sim;

pub use error::{Error, Result};
