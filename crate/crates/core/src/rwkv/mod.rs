//! RWKV-7 style backbone with per-head matrix-valued states.
//!
//! Each time-mix head keeps an `S×S` state updated as
//! `S_t = S_{t-1} W_t + v_t k_tᵀ` with `W_t = diag(w_t) - κ̂_t (a_t ⊙ κ̂_t)ᵀ`,
//! and reads out `o_t = S_t r_t`. A full [`StateStack`] (every layer's
//! matrices plus both token-shift carries) is enough to resume a forward
//! pass exactly where it stopped.

mod backward;
mod forward;
mod mix;
mod ops;
mod state;
mod weights;

pub use backward::{
    block_backward, channel_mix_backward, layer_norm_backward, time_mix_backward, zeroed, LayerStateGrad,
};
pub use forward::{advance, forward_sequence, ForwardOutput, ForwardStats};
pub use mix::{
    block_step, channel_mix_step, layer_norm, time_mix_step, BlockTape, ChannelMixTape, LayerNormTape, TimeMixTape,
    LN_EPS,
};
pub use ops::{state_update, state_update_structured, transition_matrix};
pub use state::{extract_states, LayerState, StateStack};
pub use weights::{BlockWeights, ChannelMixWeights, LayerNorm, ModelWeights, TimeMixWeights};

use alloc::{format, vec::Vec};

use crate::error::{Error, Result};
use crate::params::Fnv64;
use crate::tensor::Precision;

pub type Token = u32;

/// Byte-level vocabulary: ids 0..=255 are raw bytes, 256 is EOS.
pub const BYTE_VOCAB: usize = 257;
pub const EOS_TOKEN: Token = 256;

/// Tokenize text as its UTF-8 bytes.
pub fn byte_tokens(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// Architectural hyperparameters. `d_model` must equal `n_heads * head_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_size: usize,
    pub vocab_size: usize,
    pub eos_id: Token,
    pub k_eos: usize,
    pub precision: Precision,
}

impl ModelConfig {
    /// L=4, d=64, H=4, S=16 with the byte vocabulary and four EOS tokens.
    pub fn tiny() -> Self {
        ModelConfig::new(4, 4, 16)
    }

    /// Byte-vocabulary config with `d_model = n_heads * head_size`.
    pub fn new(n_layers: usize, n_heads: usize, head_size: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model: n_heads * head_size,
            n_heads,
            head_size,
            vocab_size: BYTE_VOCAB,
            eos_id: EOS_TOKEN,
            k_eos: 4,
            precision: Precision::F64,
        }
    }

    /// Channel-mix hidden width.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.n_heads == 0 || self.head_size == 0 {
            return bad("n_heads and head_size must be >= 1");
        }
        if self.d_model != self.n_heads * self.head_size {
            return bad("d_model must equal n_heads * head_size");
        }
        if self.k_eos == 0 {
            return bad("k_eos must be >= 1");
        }
        if self.eos_id as usize >= self.vocab_size {
            return bad("eos_id must be < vocab_size");
        }
        Ok(())
    }

    pub(crate) fn hash_into(&self, h: &mut Fnv64) {
        for x in [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.head_size,
            self.vocab_size,
            self.eos_id as usize,
            self.k_eos,
        ] {
            h.write_u64(x as u64);
        }
        h.write_u64(self.precision.bytes() as u64);
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}
