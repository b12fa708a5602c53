//! Core numerics for e-beam lithography process studies.
//!
//! The crate is split along the analysis pipeline:
//!
//! - [`layout`]: rectangle designs, rasterization, connected components.
//! - [`fieldkernel`]: double-Gaussian energy PSF and FFT convolution.
//! - [`virtualfab`]: exposure/development simulation, outcome classification
//!   and the five-factor process response used to label design points.
//! - [`yieldsurface`]: logistic response-surface fitting and process windows.
//! - [`pec`]: density-dependent onset-dose model, robust `eta` regression and
//!   dose-multiplier maps.

pub mod error;
pub mod fieldkernel;
pub mod fmt;
pub mod layout;
pub mod pec;
pub mod rng;
pub mod virtualfab;
pub mod yieldsurface;

pub use error::{Error, Result};
