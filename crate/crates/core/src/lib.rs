//! Self-supervised remote photoplethysmography from spatial-temporal maps,
//! with ratio prompts as text supervision.

pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod pairs;
pub mod physio;
pub mod spectrum;
pub mod stmap;
pub mod synthgen;
pub mod tvr;

pub use error::{Error, Result};
