//! Engine for novel class discovery and interactive clustering of tabular data.

pub mod clustering;
pub mod dataset;
pub mod error;
pub mod ncd;
pub mod nn;
pub mod pipeline;
pub mod progress;
pub mod projection;
pub mod rules;
pub mod synthetic;

pub use error::{Error, Result};
