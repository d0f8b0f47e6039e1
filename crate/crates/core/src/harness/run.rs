//! Stateful multi-turn driver.
//!
//! Each turn runs, in order: optional pre-turn eviction, unconditional
//! prefill of the user tokens, greedy decoding with optional per-token
//! eviction, then positional diagnostics. The cache persists across turns and
//! is only reset between conversations.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::{footprint, KvCache};
use crate::config::{ModelConfig, Preset};
use crate::diagnostics::{diagnose, PositionalDiagnostics};
use crate::error::{KvSimError, Result};
use crate::eviction::{accumulate_attention, apply_policy, should_evict, AttentionRecord, EvictionPolicy};
use crate::harness::trace::{ConversationTrace, Turn};
use crate::model::{greedy_token, CaptureMode, StepOutput, ToyModel};

/// Where the eviction trigger is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoints {
    pub before_prefill: bool,
    pub per_generated_token: bool,
}

impl Default for Checkpoints {
    fn default() -> Self {
        Self {
            before_prefill: true,
            per_generated_token: true,
        }
    }
}

impl Checkpoints {
    pub const BEFORE_PREFILL_ONLY: Self = Self {
        before_prefill: true,
        per_generated_token: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Geometry of the toy model that runs attention.
    pub model: ModelConfig,
    /// Geometry used for byte accounting and the context-window check.
    pub accounting: ModelConfig,
    pub policy: EvictionPolicy,
    pub threshold_bytes: u64,
    pub checkpoints: Checkpoints,
    /// Keep generating through the end-of-sequence token.
    pub ignore_eos: bool,
}

impl RunConfig {
    /// Preset geometry for accounting, toy geometry (seeded with `seed`) for
    /// the model.
    #[must_use]
    pub fn for_preset(preset: Preset, policy: EvictionPolicy, threshold_bytes: u64, seed: u64) -> Self {
        Self {
            model: preset.simulation_config().with_seed(seed),
            accounting: preset.config(),
            policy,
            threshold_bytes,
            checkpoints: Checkpoints::default(),
            ignore_eos: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.accounting.validate()?;
        self.policy.validate()?;
        if self.threshold_bytes == 0 && self.policy != EvictionPolicy::NoEviction {
            return Err(KvSimError::InvalidArgument(format!(
                "{} needs a positive eviction threshold",
                self.policy.name()
            )));
        }
        Ok(())
    }

    #[must_use]
    pub fn bytes_for(&self, slots: usize) -> u64 {
        footprint(&self.accounting, slots).bytes
    }

    /// Largest slot count that does not trip the trigger.
    #[must_use]
    pub fn threshold_tokens(&self) -> usize {
        (self.threshold_bytes / self.accounting.bytes_per_token()) as usize
    }
}

/// Measurements for one turn. Byte figures use the accounting geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    /// 1-based.
    pub turn_index: usize,
    pub user_tokens: usize,
    pub cache_bytes_pre_turn: u64,
    pub tokens_evicted_pre_turn: usize,
    pub tokens_evicted_during_generation: usize,
    /// Wall-clock spent evicting, both checkpoints combined (simulator time).
    pub eviction_elapsed: Duration,
    pub cache_bytes_post_prefill: u64,
    pub cache_bytes_end_generation: u64,
    /// Largest size seen at any point of the turn.
    pub peak_cache_bytes: u64,
    /// Prefill wall-clock (simulator time).
    pub ttft_elapsed: Duration,
    pub decode_elapsed: Duration,
    pub generated_tokens: usize,
    pub throughput_tokens_per_second: f64,
    pub positional: PositionalDiagnostics,
    pub seen_tokens_end: usize,
    pub slots_end: usize,
}

impl TurnMetrics {
    #[must_use]
    pub fn tokens_evicted(&self) -> usize {
        self.tokens_evicted_pre_turn + self.tokens_evicted_during_generation
    }
}

/// One conversation's live state: the cache and the latest attention record.
#[derive(Debug)]
pub struct Session<'a> {
    model: &'a ToyModel,
    config: &'a RunConfig,
    cache: KvCache,
    record: AttentionRecord,
    turns_done: usize,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a ToyModel, config: &'a RunConfig) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(KvSimError::InvalidState(
                "model was not built from the run's model config".into(),
            ));
        }
        Ok(Self {
            model,
            config,
            cache: KvCache::new(&config.model),
            record: AttentionRecord::default(),
            turns_done: 0,
        })
    }

    #[must_use]
    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    fn bytes(&self) -> u64 {
        self.config.bytes_for(self.cache.len())
    }

    fn pass(&mut self, tokens: &[u32]) -> Result<StepOutput> {
        let out = self.model.forward(&mut self.cache, tokens, CaptureMode::ColumnSums)?;
        self.record = accumulate_attention(&out, Some(&self.record))?;
        Ok(out)
    }

    fn evict(&mut self) -> Result<(usize, Duration)> {
        let stats = apply_policy(&mut self.cache, &self.config.policy, Some(&mut self.record))?;
        Ok((stats.tokens_evicted, stats.elapsed))
    }

    pub fn run_turn(&mut self, turn: &Turn) -> Result<TurnMetrics> {
        let cfg = self.config;
        let eos = cfg.model.eos_token();
        let cache_bytes_pre_turn = self.bytes();

        let mut tokens_evicted_pre_turn = 0;
        let mut eviction_elapsed = Duration::ZERO;
        if cfg.checkpoints.before_prefill && should_evict(cache_bytes_pre_turn, cfg.threshold_bytes) {
            let (n, t) = self.evict()?;
            tokens_evicted_pre_turn = n;
            eviction_elapsed += t;
        }

        let prefill_start = Instant::now();
        let mut out = self.pass(&turn.user_tokens)?;
        let ttft_elapsed = prefill_start.elapsed();
        let cache_bytes_post_prefill = self.bytes();
        let mut peak_cache_bytes = cache_bytes_pre_turn.max(cache_bytes_post_prefill);

        let mut tokens_evicted_during_generation = 0;
        let mut generated_tokens = 0;
        let decode_start = Instant::now();
        let mut next = greedy_token(&out.logits);
        while generated_tokens < turn.max_new_tokens {
            if next == eos && !cfg.ignore_eos {
                break;
            }
            out = self.pass(&[next])?;
            generated_tokens += 1;
            let bytes = self.bytes();
            peak_cache_bytes = peak_cache_bytes.max(bytes);
            if cfg.checkpoints.per_generated_token && should_evict(bytes, cfg.threshold_bytes) {
                let (n, t) = self.evict()?;
                tokens_evicted_during_generation += n;
                eviction_elapsed += t;
            }
            next = greedy_token(&out.logits);
        }
        let decode_elapsed = decode_start.elapsed();
        let throughput_tokens_per_second = if generated_tokens == 0 || decode_elapsed.is_zero() {
            0.0
        } else {
            generated_tokens as f64 / decode_elapsed.as_secs_f64()
        };

        self.turns_done += 1;
        Ok(TurnMetrics {
            turn_index: self.turns_done,
            user_tokens: turn.user_tokens.len(),
            cache_bytes_pre_turn,
            tokens_evicted_pre_turn,
            tokens_evicted_during_generation,
            eviction_elapsed,
            cache_bytes_post_prefill,
            cache_bytes_end_generation: self.bytes(),
            peak_cache_bytes,
            ttft_elapsed,
            decode_elapsed,
            generated_tokens,
            throughput_tokens_per_second,
            positional: diagnose(self.cache.original_positions(), cfg.accounting.max_position),
            seen_tokens_end: self.cache.seen_tokens(),
            slots_end: self.cache.len(),
        })
    }
}

/// Runs every turn of `trace` on a fresh cache.
pub fn run_conversation_with(
    model: &ToyModel,
    config: &RunConfig,
    trace: &ConversationTrace,
) -> Result<Vec<TurnMetrics>> {
    trace.validate()?;
    let mut session = Session::new(model, config)?;
    trace.turns.iter().map(|t| session.run_turn(t)).collect()
}

/// Builds the toy model from `config` and runs `trace`.
pub fn run_conversation(config: &RunConfig, trace: &ConversationTrace) -> Result<Vec<TurnMetrics>> {
    let model = ToyModel::new(config.model)?;
    run_conversation_with(&model, config, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::mib_to_bytes;
    use crate::harness::trace::{parse_synthetic, SyntheticTrace, SyntheticTurn};
    use std::path::Path;

    fn trace(counts: &[(usize, usize)], seed: u64) -> ConversationTrace {
        let spec = SyntheticTrace {
            id: "t".into(),
            turns: counts.iter().map(|&(user, gen)| SyntheticTurn { user, gen }).collect(),
        };
        parse_synthetic(&serde_json::to_string(&spec).unwrap(), Path::new("t"), 257, seed)
            .unwrap()
            .remove(0)
    }

    fn toy_run(policy: EvictionPolicy, threshold_tokens: u64) -> RunConfig {
        let mut cfg = RunConfig::for_preset(Preset::Toy, policy, threshold_tokens * 256, 1);
        cfg.ignore_eos = true;
        cfg
    }

    fn check_identity(cfg: &RunConfig, metrics: &[TurnMetrics]) {
        let per = cfg.accounting.bytes_per_token();
        for m in metrics {
            assert_eq!(
                m.cache_bytes_post_prefill,
                m.cache_bytes_pre_turn - m.tokens_evicted_pre_turn as u64 * per + m.user_tokens as u64 * per
            );
            assert_eq!(m.seen_tokens_end, m.slots_end);
        }
    }

    #[test]
    fn single_turn_starts_empty() {
        let cfg = toy_run(EvictionPolicy::NoEviction, 10);
        let m = run_conversation(&cfg, &trace(&[(12, 5)], 0)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].turn_index, 1);
        assert_eq!(m[0].cache_bytes_pre_turn, 0);
        assert_eq!(m[0].generated_tokens, 5);
        assert_eq!(m[0].slots_end, 17);
    }

    #[test]
    fn baseline_tracks_cumulative_tokens() {
        let cfg = toy_run(EvictionPolicy::NoEviction, 1);
        let t = trace(&[(40, 10), (30, 20), (200, 5)], 3);
        let m = run_conversation(&cfg, &t).unwrap();
        let mut total = 0;
        for (turn, metrics) in t.turns.iter().zip(&m) {
            total += turn.user_tokens.len() + turn.max_new_tokens;
            assert_eq!(metrics.slots_end, total);
            assert_eq!(metrics.tokens_evicted(), 0);
        }
        check_identity(&cfg, &m);
        // Crossing the toy context window (256) shows up as extrapolation.
        assert_eq!(m[1].positional.extrapolated_slots, 0);
        assert_eq!(m[2].positional.extrapolated_slots, 305 - 256);
    }

    #[test]
    fn unreachable_threshold_matches_baseline() {
        let t = trace(&[(30, 8), (25, 8), (40, 4)], 5);
        let base = run_conversation(&toy_run(EvictionPolicy::NoEviction, 1_000_000), &t).unwrap();
        for policy in [
            EvictionPolicy::AttentionTop { keep_ratio: 0.5 },
            EvictionPolicy::EvictOldest { window_tokens: 3 },
            EvictionPolicy::SlidingWindowGist {
                gist_token_count: 1,
                recent_token_count: 1,
            },
        ] {
            let other = run_conversation(&toy_run(policy, 1_000_000), &t).unwrap();
            for (a, b) in base.iter().zip(&other) {
                assert_eq!(a.slots_end, b.slots_end);
                assert_eq!(a.positional, b.positional);
                assert_eq!(b.tokens_evicted(), 0);
            }
        }
    }

    #[test]
    fn prefill_surges_past_threshold() {
        // Llama-3 accounting: 8 tokens per MiB; threshold 600 MiB = 4800 tokens.
        let mut cfg = RunConfig::for_preset(
            Preset::Llama3_8b,
            EvictionPolicy::AttentionTop { keep_ratio: 0.99 },
            mib_to_bytes(600.0),
            2,
        );
        cfg.ignore_eos = true;
        cfg.checkpoints = Checkpoints::BEFORE_PREFILL_ONLY;
        // 4320 tokens = 90% of threshold after turn 1, then a 1000-token prompt.
        let m = run_conversation(&cfg, &trace(&[(4300, 20), (1000, 1)], 4)).unwrap();
        assert_eq!(m[1].cache_bytes_pre_turn, mib_to_bytes(540.0));
        assert_eq!(m[1].tokens_evicted_pre_turn, 0);
        assert!(m[1].cache_bytes_post_prefill > cfg.threshold_bytes);
        check_identity(&cfg, &m);
    }

    #[test]
    fn per_token_checkpoint_bounds_window_policies() {
        let t = trace(&[(50, 30), (70, 40), (20, 60), (90, 10)], 8);
        let largest_prefill = 90;
        for policy in [
            EvictionPolicy::EvictOldest { window_tokens: 64 },
            EvictionPolicy::SlidingWindowGist {
                gist_token_count: 16,
                recent_token_count: 32,
            },
        ] {
            let cfg = toy_run(policy, 64);
            let m = run_conversation(&cfg, &t).unwrap();
            let bound = cfg.bytes_for(cfg.threshold_tokens() + largest_prefill + 1);
            for turn in &m {
                assert!(turn.peak_cache_bytes <= bound, "{policy}: {turn:?}");
                assert!(turn.cache_bytes_end_generation <= cfg.threshold_bytes);
            }
            check_identity(&cfg, &m);
        }
    }

    #[test]
    fn attention_top_scrambles_positions() {
        let cfg = toy_run(EvictionPolicy::AttentionTop { keep_ratio: 0.9 }, 40);
        let m = run_conversation(&cfg, &trace(&[(30, 10), (30, 10), (30, 10)], 2)).unwrap();
        check_identity(&cfg, &m);
        assert!(m.iter().any(|t| t.tokens_evicted() > 0));
        assert!(m.last().unwrap().positional.discontinuities >= 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = toy_run(EvictionPolicy::AttentionTop { keep_ratio: 0.8 }, 50);
        let t = trace(&[(40, 20), (40, 20)], 6);
        let strip = |m: Vec<TurnMetrics>| {
            m.into_iter()
                .map(|t| {
                    (
                        t.slots_end,
                        t.generated_tokens,
                        t.positional,
                        t.cache_bytes_end_generation,
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(
            strip(run_conversation(&cfg, &t).unwrap()),
            strip(run_conversation(&cfg, &t).unwrap())
        );
    }

    #[test]
    fn eos_stops_generation_unless_ignored() {
        let mut cfg = toy_run(EvictionPolicy::NoEviction, 1);
        cfg.model.vocab_size = 7;
        cfg.model.seed = 3;
        cfg.ignore_eos = false;
        let t = ConversationTrace {
            id: "eos".into(),
            turns: vec![Turn {
                user_tokens: vec![0; 4],
                max_new_tokens: 50,
            }],
        };
        // Frozen from a scan of small vocabularies: this model emits id 6 after 11 tokens.
        let stopped = run_conversation(&cfg, &t).unwrap();
        assert_eq!(stopped[0].generated_tokens, 11);
        assert_eq!(stopped[0].slots_end, 15);
        cfg.ignore_eos = true;
        assert_eq!(run_conversation(&cfg, &t).unwrap()[0].generated_tokens, 50);
    }

    #[test]
    fn zero_threshold_rejected_for_evicting_policy() {
        let cfg = RunConfig::for_preset(Preset::Toy, EvictionPolicy::EvictOldest { window_tokens: 4 }, 0, 0);
        assert!(cfg.validate().is_err());
        assert!(RunConfig::for_preset(Preset::Toy, EvictionPolicy::NoEviction, 0, 0)
            .validate()
            .is_ok());
    }
}
