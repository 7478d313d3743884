//! Desk-scale Transformer: source encoder, bidirectional target encoder,
//! vocabulary head for word prediction and a score head for the energy
//! function. Everything is generic over the float type so that training runs
//! in `f32` and gradient checks in `f64`.

pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod params;

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WlacError};
use crate::vocab::MASK_ID;

pub use network::{gather_rows, scatter_rows, ForwardPass, PackedBatch};
pub use params::{HeadKind, Model, ParamEntry, ParamLayout};

pub trait Scalar: NdFloat + FromPrimitive + Default + std::iter::Sum {}

impl<T: NdFloat + FromPrimitive + Default + std::iter::Sum> Scalar for T {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_src_layers: usize,
    pub n_tgt_layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
}

impl ModelConfig {
    /// 64-wide, 4 heads, two layers per side.
    pub fn desk(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            d_ffn: 256,
            n_heads: 4,
            n_src_layers: 2,
            n_tgt_layers: 2,
            dropout: 0.1,
            max_len: 128,
            src_vocab_size,
            tgt_vocab_size,
        }
    }

    /// The smallest useful network, for gradient checks and unit tests.
    pub fn tiny(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            n_src_layers: 1,
            n_tgt_layers: 1,
            dropout: 0.0,
            max_len: 32,
            src_vocab_size,
            tgt_vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.d_model,
            self.d_ffn,
            self.n_heads,
            self.n_src_layers,
            self.n_tgt_layers,
            self.max_len,
            self.src_vocab_size,
            self.tgt_vocab_size,
        ];
        if counts.contains(&0) {
            return Err(WlacError::InvalidArgument("model sizes must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(WlacError::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(WlacError::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Target-side input: left context, the probe slot, right context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetInput {
    pub tokens: Vec<u32>,
    pub probe_position: usize,
}

impl TargetInput {
    pub fn new(left: &[u32], probe: u32, right: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(left.len() + 1 + right.len());
        tokens.extend_from_slice(left);
        tokens.push(probe);
        tokens.extend_from_slice(right);
        TargetInput {
            tokens,
            probe_position: left.len(),
        }
    }

    pub fn masked(left: &[u32], right: &[u32]) -> Self {
        Self::new(left, MASK_ID, right)
    }

    /// Same context with a different probe token.
    pub fn with_probe(&self, probe: u32) -> Self {
        let mut tokens = self.tokens.clone();
        tokens[self.probe_position] = probe;
        TargetInput {
            tokens,
            probe_position: self.probe_position,
        }
    }
}
