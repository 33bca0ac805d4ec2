//! Photon-level Monte Carlo simulation of CHSH tests over satellite links and
//! the geographic "Bell violation shadows" they produce.

pub mod analytic;
pub mod apps;
pub mod belltest;
pub mod channel;
pub mod config;
pub mod error;
pub mod geodyn;
pub mod io;
pub mod photonsim;
pub mod rng;
pub mod scenario;
pub mod shadows;

pub use error::{Error, Result};
