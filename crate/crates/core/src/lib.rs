//! Weakly supervised object localization by entropy minimization over bags
//! of region proposals with precomputed features.
//!
//! The pipeline is [`data`] (schema and synthetic generator) into
//! [`trainer`] (clique discovery, local min-entropy localization,
//! recurrent score aggregation) and then [`eval`] (detection, AP, CorLoc,
//! pointing and localization statistics).

pub mod cli;
pub mod data;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
