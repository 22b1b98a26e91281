//! Fixed-time adaptive parameter estimation synthesized with robust-adaptive
//! control-barrier-function quadratic programming.
//!
//! The crate simulates control-affine systems with parametric uncertainty,
//! `xdot = f(x) + g(x) u + Delta(x) theta`, identifying `theta` within a
//! fixed time through filtered-regressor memory and driving the plant with a
//! CLF-CBF quadratic program whose safety margin shrinks as the estimation
//! error envelope decays. Two shipped scenarios exercise the stack: a planar
//! "shoot the gap" problem and a highway overtake with a go/no-go decision.

pub mod error;
pub mod estimator;
pub mod qp;
pub mod safety;
pub mod scenarios;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
pub use types::ParameterBox;
