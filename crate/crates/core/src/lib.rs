//! Desk-scale simulator for stateful multi-turn KV-cache management.
//!
//! A seeded toy attention stack with rotary position embeddings runs prefill
//! and decode against a [`KvCache`]; four eviction strategies compact that
//! cache when it crosses a byte threshold; positional diagnostics measure how
//! far the survivors' stored rotations drift from their post-compaction
//! positions. The [`harness`] drives whole conversations and writes reports.

pub mod cache;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod eviction;
pub mod harness;
pub mod model;
pub mod rope;

pub use cache::{current_bytes, footprint, FootprintReport, KvCache, MIB};
pub use config::{ModelConfig, Preset};
pub use diagnostics::{diagnose, fidelity_timeline, gap_stats, FidelitySummary, PositionalDiagnostics};
pub use error::{KvSimError, Result};
pub use eviction::{
    accumulate_attention, apply_policy, select_keep_indices, should_evict, AttentionRecord, EvictionPolicy,
    EvictionStats, StrategyKind,
};
pub use model::{attend, greedy_token, AttentionCapture, CaptureMode, StepOutput, TokenId, ToyModel};
pub use rope::rope_rotate;
