//! Risk-sensitive stochastic maximum principle for fully coupled
//! forward-backward SDEs with jumps.

pub mod adjoint;
pub mod cashflow;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod error;
pub mod fbsde;
pub mod model;
pub mod regression;
pub mod risk;
pub mod rng;

pub use error::{Error, Result};
