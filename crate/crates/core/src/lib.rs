pub mod arx;
pub mod dataset;
pub mod error;
pub mod gt;
pub mod harness;
pub mod lstm;
pub mod meals;
pub mod metrics;
pub mod mpc;
pub mod plant;
pub mod predictor;
pub mod tensors;
pub(crate) mod util;

pub use error::{Error, Result};

/// Controller and CGM sampling period in minutes.
pub const SAMPLE_MINUTES: u32 = 15;
/// Samples per day at the controller rate.
pub const SAMPLES_PER_DAY: usize = 96;
