//! Nonlocal Wasserstein gradient flows of the relative entropy on the flat
//! torus, discretized as reversible jump systems.

pub mod discretization;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod functionals;
pub mod kernels;
pub mod metric;
pub mod quadrature;
pub mod sampler;
pub mod torus;

pub use error::{Error, Result};
