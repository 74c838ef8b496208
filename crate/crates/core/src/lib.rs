//! Nash-equilibrium seeking under heavy-tailed gradient noise.
//!
//! The crate pairs median-of-means gradient estimation (plain and with online
//! bias correction) with three clipping baselines, a Monte-Carlo harness that
//! compares them at equal sample budgets, and numerical checks of the
//! tail-bound and almost-sure rate guarantees behind the estimator.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod game;
pub mod harness;
pub mod noise;
pub mod seekers;
pub mod svg;

pub use error::{Error, Result};
