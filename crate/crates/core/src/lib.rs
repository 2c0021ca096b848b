//! Class-token attention fusion for two-modality classification, with a
//! query-rotation controller that rebalances attention between modalities.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod rollingq;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use fusion::{AblationMode, Modality};
pub use linalg::{Matrix, Rng, Vector};
