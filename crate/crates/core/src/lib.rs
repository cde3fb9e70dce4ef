//! Numerical laboratory for logarithmic epiperimetric inequalities of the
//! obstacle problem in dimensions 2 and 3.

pub mod competitor;
pub mod config;
pub mod corpus;
pub mod critical;
pub mod energy;
pub mod error;
pub mod flow;
pub mod obstacle;
pub mod sphere;
pub mod suite;

pub use error::{Error, Result};
