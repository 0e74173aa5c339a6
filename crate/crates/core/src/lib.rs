//! Analysis and simulation of two-station photon-pair time-tag data.
//!
//! The pipeline is: load (or [`sim::simulate`]) a [`dataset::Dataset`], pair
//! events across stations with [`coincidence::match_coincidences`], bin the
//! pairs into per-setting [`coincidence::CountsTable`]s, then reduce them to
//! single-particle averages, correlations and the CHSH function in [`stats`].
//! [`efficiency`] fits a detector-efficiency model to the resulting averages.

pub mod coincidence;
pub mod dataset;
pub mod efficiency;
pub mod error;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};

/// Degrees to radians.
pub fn deg(d: f64) -> f64 {
    d.to_radians()
}
