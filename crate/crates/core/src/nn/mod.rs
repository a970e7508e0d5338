//! Pre-norm transformer encoder-decoder.
//!
//! Every forward pass runs inside a [`Session`], which owns a fresh
//! [`Graph`](crate::tensor::Graph) and binds parameters from a
//! [`ParamStore`] on first use.

mod model;
mod params;
mod search;
mod session;

pub use model::{
    decode_logits, decoder_forward, decoder_input, decoder_labels, embed_tokens, encode, init_params,
    positional_encoding, EncoderOutput,
};
pub use params::{Init, ParamStore, Precision};
pub use search::{beam_decode, greedy_decode, Decoder};
pub use session::{causal_keep, key_keep, Keep, Session};

/// Building blocks shared with the memory encoders.
pub(crate) mod model_internals {
    pub(crate) use super::model::{block, check_ids, embed_tokens, init_attention, init_block, init_norm, not_pad};
    pub(crate) use super::session::key_keep;
}

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryMode;

/// Layer norm variance epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    /// Longest encoder or decoder input, counting the added EOS or BOS.
    pub max_len: usize,
    pub memory_mode: MemoryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            dropout_rate: 0.1,
            vocab_size: 0,
            max_len: 128,
            memory_mode: MemoryMode::Cstm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ff == 0 || self.dec_layers == 0 {
            return Err(Error::Config("d_ff and dec_layers must be positive".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Reads the model keys from `kv`, starting from the defaults.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            d_model: kv.take("d_model", d.d_model)?,
            num_heads: kv.take("num_heads", d.num_heads)?,
            d_ff: kv.take("d_ff", d.d_ff)?,
            enc_layers: kv.take("enc_layers", d.enc_layers)?,
            dec_layers: kv.take("dec_layers", d.dec_layers)?,
            dropout_rate: kv.take("dropout_rate", d.dropout_rate)?,
            vocab_size: kv.take("vocab_size", d.vocab_size)?,
            max_len: kv.take("max_len", d.max_len)?,
            memory_mode: kv.take("memory_mode", d.memory_mode)?,
        };
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("d_model", self.d_model);
        kv.set("num_heads", self.num_heads);
        kv.set("d_ff", self.d_ff);
        kv.set("enc_layers", self.enc_layers);
        kv.set("dec_layers", self.dec_layers);
        kv.set("dropout_rate", self.dropout_rate);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_len", self.max_len);
        kv.set("memory_mode", self.memory_mode);
        kv
    }

    /// The model this config describes as a checkpoint metadata string.
    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let cfg = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}
