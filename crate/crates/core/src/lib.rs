//! Continuous piecewise-affine regression by smoothing.
//!
//! Models are differences of two max-affine functions ([`model`]). The
//! least-squares criterion is made differentiable by replacing each maximum
//! with a smooth surrogate ([`smoothing`]) and minimized with annealed BFGS
//! and random restarts ([`optimizer`]). [`inference`] provides covariance
//! estimates, confidence intervals and the hinge baseline, [`simulate`] and
//! [`experiments`] the synthetic studies, and [`cli`] the `pwafit` tool.
//!
//! ```
//! use pwafit::optimizer::{fit_pool, FitConfig};
//! use pwafit::simulate::{generate, preset, Preset};
//! use pwafit::smoothing::Prox;
//!
//! let data = generate(&preset(Preset::BrokenStick200, 1)?)?;
//! let fit = fit_pool(&data, 2, 0, Prox::SquaredError, &FitConfig::default())?;
//! assert!(fit.converged && fit.empirical_norm < 0.02);
//! # Ok::<(), pwafit::Error>(())
//! ```

pub mod cli;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod simulate;
pub mod smoothing;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/smoothing.md")]
    mod smoothing {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
