//! Estimation of direct and spill-over causal treatment effects under
//! spatial interference.
//!
//! Treatments at one location can affect responses at others. This crate
//! models that interference with a distance kernel: each location's
//! spill-over exposure is the kernel-weighted sum of treatments at all other
//! locations. Confounding is removed by conditioning on low-dimensional
//! parametric summaries of the generalized propensity score (the joint law
//! of direct and spill-over treatment given covariates), entered into a
//! Bayesian spline regression fitted by Gibbs sampling with a Metropolis
//! step for the kernel range.
//!
//! The crate splits into:
//!
//! - [`spatial`]: grids, kernels, spill-over fields, kernel smoothing
//! - [`synth`]: the simulation-study data generator
//! - [`propensity`]: logistic propensities and spill-over summaries
//! - [`spline`]: clamped B-spline bases
//! - [`inference`]: the MCMC engine and comparison models
//! - [`harness`]: benchmark orchestration and raster ingestion

pub mod error;
pub mod harness;
pub mod inference;
pub mod io;
pub mod propensity;
pub mod rng;
pub mod spatial;
pub mod spline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
