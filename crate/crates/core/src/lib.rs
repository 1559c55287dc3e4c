pub mod cuer;
pub mod domain;
pub mod error;
pub mod features;
pub mod generator;
pub mod io;
pub mod mat;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod recognizer;

pub use error::{Error, Result};
