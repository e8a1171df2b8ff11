//! Calibration of car-following models against leader–follower trajectories
//! and validation of the calibrated driver populations in microscopic
//! scenarios.

pub mod analysis;
pub mod calibration;
pub mod error;
pub mod models;
pub mod sensitivity;
pub mod sim;
pub mod synthetic;
pub mod trajectory;

pub use error::{Error, Result};
