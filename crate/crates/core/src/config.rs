//! Model geometry and the named presets used for byte accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KvSimError, Result};

/// Layer/head/dimension parameters of a (toy) transformer.
///
/// The same struct drives both the attention math of [`crate::model::ToyModel`]
/// and the footprint arithmetic of [`crate::cache::footprint`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_attention_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim_k: usize,
    pub head_dim_v: usize,
    pub bytes_per_element: usize,
    /// Architectural context window the positional scheme was trained for.
    pub max_position: usize,
    pub rope_base: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_attention_heads", self.num_attention_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim_k", self.head_dim_k),
            ("head_dim_v", self.head_dim_v),
            ("bytes_per_element", self.bytes_per_element),
            ("max_position", self.max_position),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(KvSimError::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.num_kv_heads > self.num_attention_heads || !self.num_attention_heads.is_multiple_of(self.num_kv_heads) {
            return Err(KvSimError::InvalidArgument(format!(
                "num_attention_heads ({}) must be a multiple of num_kv_heads ({})",
                self.num_attention_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim_k.is_multiple_of(2) {
            return Err(KvSimError::InvalidArgument(format!(
                "head_dim_k ({}) must be even for RoPE",
                self.head_dim_k
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(KvSimError::InvalidArgument(format!(
                "rope_base must be a positive real, got {}",
                self.rope_base
            )));
        }
        Ok(())
    }

    /// Residual stream width: one `head_dim_k` slice per query head.
    #[must_use]
    pub const fn hidden_size(&self) -> usize {
        self.num_attention_heads * self.head_dim_k
    }

    /// KV head serving query head `head` (grouped-query mapping).
    #[must_use]
    pub const fn kv_head_for(&self, head: usize) -> usize {
        head * self.num_kv_heads / self.num_attention_heads
    }

    /// Token id that ends generation.
    #[must_use]
    pub const fn eos_token(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    /// Cached elements contributed by one token: `2 · L · kv_heads · d_k`.
    #[must_use]
    pub const fn elements_per_token(&self) -> u64 {
        2 * self.num_layers as u64 * self.num_kv_heads as u64 * self.head_dim_k as u64
    }

    #[must_use]
    pub const fn bytes_per_token(&self) -> u64 {
        self.elements_per_token() * self.bytes_per_element as u64
    }

    #[must_use]
    pub const fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Named model presets.
///
/// The Llama presets carry the real geometry for byte accounting only; the
/// attention math of a simulation always runs on toy dimensions (see
/// [`Preset::simulation_config`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "llama3-8b")]
    Llama3_8b,
    #[serde(rename = "llama2-7b")]
    Llama2_7b,
    #[serde(rename = "toy")]
    Toy,
}

const TOY: ModelConfig = ModelConfig {
    num_layers: 2,
    num_attention_heads: 4,
    num_kv_heads: 2,
    head_dim_k: 16,
    head_dim_v: 16,
    bytes_per_element: 2,
    max_position: 256,
    rope_base: 10_000.0,
    vocab_size: 257,
    seed: 0,
};

impl Preset {
    pub const ALL: [Self; 3] = [Self::Llama3_8b, Self::Llama2_7b, Self::Toy];

    #[must_use]
    pub const fn name(self) -> &'static str {
        match self {
            Self::Llama3_8b => "llama3-8b",
            Self::Llama2_7b => "llama2-7b",
            Self::Toy => "toy",
        }
    }

    /// Geometry used for footprint accounting and context-window checks.
    #[must_use]
    pub const fn config(self) -> ModelConfig {
        match self {
            Self::Llama3_8b => ModelConfig {
                num_layers: 32,
                num_attention_heads: 32,
                num_kv_heads: 8,
                head_dim_k: 128,
                head_dim_v: 128,
                bytes_per_element: 2,
                max_position: 8192,
                rope_base: 500_000.0,
                vocab_size: 128_256,
                seed: 0,
            },
            Self::Llama2_7b => ModelConfig {
                num_layers: 32,
                num_attention_heads: 32,
                num_kv_heads: 32,
                head_dim_k: 128,
                head_dim_v: 128,
                bytes_per_element: 2,
                max_position: 4096,
                rope_base: 10_000.0,
                vocab_size: 32_000,
                seed: 0,
            },
            Self::Toy => TOY,
        }
    }

    /// Geometry of the seeded toy model that actually runs attention.
    ///
    /// Always the toy dimensions; only `max_position` follows the preset.
    #[must_use]
    pub const fn simulation_config(self) -> ModelConfig {
        let mut cfg = TOY;
        cfg.max_position = self.config().max_position;
        cfg
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = KvSimError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| KvSimError::InvalidArgument(format!("unknown preset `{s}`")))
    }
}
