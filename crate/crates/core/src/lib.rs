pub mod baselines;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod plot;
pub mod report;
pub mod robust_metric;
pub mod simulate;
pub mod solver;
pub mod transcription;

pub use error::{Error, Result};
