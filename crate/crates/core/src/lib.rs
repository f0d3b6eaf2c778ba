//! Personalized federated low-rank fine-tuning with trace-optimal merging of
//! a federated model and a purely local model.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod fisher;
pub mod merge;
pub mod model;
pub mod params;
pub mod report;
pub mod theory;

pub use error::{Error, Result};
