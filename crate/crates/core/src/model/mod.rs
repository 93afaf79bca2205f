//! Time-distributed CNN feature extractor, LSTM and mixed-activation head.
//!
//! The input `D x L` tensor is cut into `P` equal segments. Each segment
//! runs through three `conv -> ReLU -> average pool` blocks, is flattened and
//! projected by a dense ReLU layer with dropout. The LSTM consumes the `P`
//! segment features in order and its last hidden state feeds a dense head.

mod checkpoint;
mod layers;
mod network;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::codec::Assembly;
use crate::error::{invalid, Result};

pub use checkpoint::{load_params, save_params, CHECKPOINT_VERSION};
pub use layers::{head_activations, head_backward};
pub use network::{backward, backward_into, forward, forward_trace, ForwardTrace};
pub use params::{init_params, ModelParams, ParamLayout, TensorSpec};

/// Floating-point element type the network can run in.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
}

#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of input channels (D).
    pub channels: usize,
    /// Samples per channel (L).
    pub input_len: usize,
    /// Time-distributed segments (P).
    pub segments: usize,
    pub kernel: usize,
    pub filters: Vec<usize>,
    pub pool_width: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub lstm_hidden: usize,
    pub assembly: Assembly,
    pub seed: u64,
}

impl ModelConfig {
    /// Paper-scale architecture for `channels` inputs and 150 s windows at
    /// 100 Hz.
    pub fn new(channels: usize, assembly: Assembly) -> Self {
        ModelConfig {
            channels,
            input_len: 15_000,
            segments: 5,
            kernel: 100,
            filters: vec![8, 16, 32],
            pool_width: 6,
            dense_units: 50,
            dropout_rate: 0.5,
            lstm_hidden: 50,
            assembly,
            seed: 0,
        }
    }

    pub fn segment_len(&self) -> usize {
        self.input_len / self.segments
    }

    /// Sequence length entering each conv block, plus the final pooled length.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.segment_len()];
        for _ in &self.filters {
            let last = *lens.last().unwrap();
            lens.push(last / self.pool_width);
        }
        lens
    }

    pub fn flatten_len(&self) -> usize {
        self.filters.last().copied().unwrap_or(0) * self.block_lengths().last().copied().unwrap_or(0)
    }

    pub fn output_len(&self) -> usize {
        self.assembly.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.segments == 0 || self.kernel == 0 || self.pool_width == 0 {
            return Err(invalid!("model dimensions must be positive"));
        }
        if self.input_len % self.segments != 0 {
            return Err(invalid!(
                "input length {} is not divisible into {} segments",
                self.input_len,
                self.segments
            ));
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(invalid!("filters must be a non-empty list of positive counts"));
        }
        if self.flatten_len() == 0 {
            return Err(invalid!(
                "pooling collapses segment length {} to zero",
                self.segment_len()
            ));
        }
        if self.dense_units == 0 || self.lstm_hidden == 0 {
            return Err(invalid!("dense and LSTM widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid!("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_chain() {
        let cfg = ModelConfig::new(4, Assembly::SAR);
        assert_eq!(cfg.block_lengths(), vec![3000, 500, 83, 13]);
        assert_eq!(cfg.flatten_len(), 416);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ModelConfig::new(4, Assembly::S);
        cfg.segments = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(4, Assembly::S);
        cfg.pool_width = 20;
        assert!(cfg.validate().is_err());
    }
}
