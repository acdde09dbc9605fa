//! Federated learning with adaptive differential privacy, dual-layered
//! selection of archived models and updates, and calibration-based
//! federated unlearning.

pub mod aggregation;
pub mod archive_io;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod fl;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod selection;
pub mod theory;
pub mod unlearn;
pub mod vector;

pub use error::{Error, Result};
pub use vector::ParamVector;
