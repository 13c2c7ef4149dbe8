//! Simulation and optimal control of a twin-disc centrifugal fertilizer
//! spreader driving fixed tramlines over a gridded field.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod controllers;
pub mod error;
pub mod field;
pub mod kinematics;
pub mod optimizer;
pub mod simulation;
pub mod spread;

pub use error::{Result, SpreaderError};
