//! Synthetic building-energy dataset generation from property records and
//! home images, with occlusion and ablation harnesses.

pub mod backend;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod genjson;
pub mod geometry;
pub mod ingest;
pub mod label;
pub mod pipeline;
pub mod simulate;
pub mod vision;

pub use domain::*;
pub use error::{Error, Result};
