//! Maximum-likelihood estimation of edge parameters in the
//! Cavender-Farris-Neyman model on a fixed unrooted binary tree.

pub mod error;
pub mod experiment;
pub mod landscape;
pub mod likelihood;
pub mod model;
pub mod optimizer;
pub mod tree;

pub use error::{Error, Result};
