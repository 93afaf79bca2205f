//! Single-pass multi-task detection of sleep stages, EEG arousals and
//! respiratory events with 1D bounding windows.
//!
//! Pipeline: [`record`] loading and resampling, [`dataset`] windowing,
//! [`codec`] target encoding, the CNN-LSTM in [`model`], [`trainer`],
//! [`metrics`], and the synthetic generator in [`synth`]. [`experiment`]
//! wires them together for the command-line front end.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod par;
pub mod record;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
