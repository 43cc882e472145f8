//! False-data-injection laboratory for DC power-system state estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`gridcase`] parses MATPOWER case files and assembles the DC measurement
//!   model `z = Hx + e`.
//! - [`estimation`] runs weighted-least-squares estimation and the chi-square
//!   bad-data test.
//! - [`fdia`] builds stealthy attack vectors `a = Hc` and labelled datasets.
//! - [`neural`] is a small 1-D CNN stack with reverse-mode gradients and Adam,
//!   used as the multi-label attack locator.
//! - [`lesson`] searches state-space perturbations that hide an attack from
//!   both the residual test and the locator.
//! - [`harness`] drives experiment grids and the `lesson` CLI.

pub mod error;
pub mod estimation;
pub mod fdia;
pub mod gridcase;
pub mod harness;
pub mod lesson;
pub mod neural;
pub mod rng;

pub use error::{Error, Result};
