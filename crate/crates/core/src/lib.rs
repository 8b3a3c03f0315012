//! Simulator and controllers for a single-phase transformerless PV system
//! with an H5 inverter.
//!
//! - [`pv`]: single-diode array model, calibration and brute-force MPP oracle
//! - [`circuit`]: switching network, filter, grid, leakage loop, fault branch
//! - [`mpc`]: finite-control-set predictive controller
//! - [`mppt`]: incremental-conductance reference generator
//! - [`baseline`]: PI + SPWM comparison controllers (H5 and full bridge)
//! - [`scenario`], [`config`], [`engine`], [`metrics`], [`trace`]: scenario
//!   files, co-simulation, logging and post-processing
//! - [`plot`]: static SVG line plots
//! - [`acceptance`]: the end-to-end acceptance checks

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod baseline;
pub mod circuit;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod mpc;
pub mod mppt;
pub mod plot;
pub mod pv;
pub mod scenario;
pub mod trace;

pub use engine::{run, EngineError, RunOutput};
pub use scenario::{ControllerKind, Scenario};

/// Shipped scenario files.
pub mod scenarios {
    pub const CASE1: &str = include_str!("../scenarios/case1.scenario");
    pub const CASE2: &str = include_str!("../scenarios/case2.scenario");
    pub const CASE3: &str = include_str!("../scenarios/case3.scenario");
}
