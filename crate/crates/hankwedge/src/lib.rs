//! Reset-heterogeneity wage dynamics in a multi-country monetary union.
//!
//! The crate is organised bottom-up: [`calibration`] holds parameters and file
//! formats, [`suffstats`] the closed-form statistics, [`household`] the
//! heterogeneous-agent block, [`blocks`] the model equations, [`solver`] the
//! sequence-space solution and [`experiments`] the scenario runners.

pub mod blocks;
pub mod calibration;
pub mod error;
pub mod experiments;
pub mod household;
pub mod solver;
pub mod suffstats;

pub use error::{Error, ErrorClass, Result};
