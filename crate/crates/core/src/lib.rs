//! Numerical toolkit for the spike-variation maximum principle of controlled
//! stochastic delay equations with pointwise and distributed state delay and
//! delayed control.
//!
//! The pipeline runs forward simulation ([`forward`]), variational equations and
//! their Volterra lift ([`variational`]), first- and second-order adjoints
//! ([`adjoint1`], [`adjoint2`]) and the maximum-condition checks ([`mp`]).

// index loops mirror the discretized sums; negated comparisons reject NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint1;
pub mod adjoint2;
pub mod error;
pub mod forward;
pub mod linalg;
pub mod model;
pub mod mp;
pub mod noise;
pub mod scenarios;
pub mod variational;

pub use error::{Error, Result};
