pub mod cli;
pub mod dual;
pub mod error;
pub mod fixtures;
pub mod lift;
pub mod market;
pub mod pricing;
pub mod primal;
pub mod solvers;
pub mod tol;

pub use error::{Error, Result};
