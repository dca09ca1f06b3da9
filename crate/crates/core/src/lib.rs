//! Optimal liquidation under permanent, temporary and market-maker inventory
//! price impact.
//!
//! The crate solves the linear-quadratic control problem through its Riccati
//! system, evaluates closed-form optimal rates where they exist, and compares
//! strategies by Monte Carlo with common random numbers.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expm;
pub mod grid;
pub mod hydro;
pub mod impact;
pub mod model;
pub mod riccati;
pub mod simulator;
pub mod stats;
pub mod strategies;
pub mod svg;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use model::{
    build_state_matrices, derive_effective_params, validate_config, EffectiveParams, MarketConfig, MarketMakerSpec,
    StateMatrices,
};
pub use riccati::RiccatiSolution;
