//! Uncertainty quantification for counterfactual predictions of
//! quantitative trade and spatial models when dyadic flows are measured
//! with error.
//!
//! The pieces compose as follows: [`eb`] calibrates a spike-and-slab prior
//! and measurement-error model and draws true flows given noisy ones,
//! [`gravity`] estimates the structural elasticity and its sampling
//! variance, [`armington`] maps flows and the elasticity to welfare
//! changes, and [`uq`] combines the two posteriors into bootstrap
//! intervals. [`robust`] and [`diagnostics`] cover sensitivity analysis and
//! model checks.

pub mod armington;
pub mod attenuation;
pub mod diagnostics;
pub mod eb;
pub mod error;
mod fe;
pub mod gravity;
pub mod io;
pub mod model;
pub mod ranks;
pub mod robust;
pub mod synthetic;
pub mod uq;

pub use error::{Error, Result};
