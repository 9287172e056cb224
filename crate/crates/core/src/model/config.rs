use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pos_enc::{PeConfig, PeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Decoder-only next-token prediction with a causal mask.
    CausalLm,
    /// Bidirectional encoder that emits answers at appended placeholder slots.
    EncoderPlaceholder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Input vocabulary, including any special tokens.
    pub vocab_size: usize,
    /// Output classes; defaults to `vocab_size`.
    pub output_size: Option<usize>,
    /// Longest sequence seen in training (placeholders included). Sizes
    /// the learned absolute table, the FIRE threshold and the randomized
    /// rotary pool.
    pub max_train_len: usize,
    pub pe: PeConfig,
    pub mode: Mode,
    pub dropout: f64,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub tie_embeddings: bool,
    /// Divide key-query logits by `√d_head` before any bias is added.
    pub scale_scores: bool,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            vocab_size: 257,
            output_size: None,
            max_train_len: 64,
            pe: PeConfig::default(),
            mode: Mode::CausalLm,
            dropout: 0.0,
            ffn_mult: 4,
            tie_embeddings: false,
            scale_scores: true,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn output_size(&self) -> usize {
        self.output_size.unwrap_or(self.vocab_size)
    }

    /// Token appended in encoder mode to mark answer slots: the last input id.
    pub fn placeholder_token(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn bidirectional(&self) -> bool {
        self.mode == Mode::EncoderPlaceholder
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::config("layers, heads, d_model and vocab_size must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.output_size == Some(0) || self.max_train_len == 0 || self.ffn_mult == 0 {
            return Err(Error::config("output_size, max_train_len and ffn_mult must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0 && self.ln_eps > 0.0) {
            return Err(Error::config("init_std and ln_eps must be positive"));
        }
        if self.tie_embeddings && self.output_size() != self.vocab_size {
            return Err(Error::config("tied embeddings need output_size == vocab_size"));
        }
        match self.pe.kind {
            PeKind::Rope | PeKind::RandomizedRope if self.d_head() % 2 != 0 => {
                return Err(Error::config(format!("rotary encoding needs an even head width, got {}", self.d_head())));
            }
            PeKind::SinusoidalApe if self.d_model % 2 != 0 => {
                return Err(Error::config("sinusoidal encoding needs an even d_model"));
            }
            _ => {}
        }
        self.pe.validate(self.heads)
    }
}
