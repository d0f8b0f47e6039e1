//! Cache-management strategies as pure index selections, plus the shared
//! threshold trigger and the attention-mass bookkeeping `AttentionTop` needs.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::error::{KvSimError, Result};
use crate::model::{AttentionCapture, StepOutput};

/// One of the four evaluated strategies with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum EvictionPolicy {
    /// Baseline: the cache grows without bound.
    #[serde(rename = "baseline")]
    NoEviction,
    /// Keep the most recent `window_tokens` slots.
    EvictOldest { window_tokens: usize },
    /// Keep the first `gist_token_count` and last `recent_token_count` slots.
    SlidingWindowGist {
        gist_token_count: usize,
        recent_token_count: usize,
    },
    /// Keep `⌈keep_ratio · slots⌉` slots with the most attention mass.
    AttentionTop { keep_ratio: f64 },
}

impl EvictionPolicy {
    pub const NAMES: [&'static str; 4] = ["baseline", "evict-oldest", "sliding-window-gist", "attention-top"];

    #[must_use]
    pub const fn name(&self) -> &'static str {
        match self {
            Self::NoEviction => "baseline",
            Self::EvictOldest { .. } => "evict-oldest",
            Self::SlidingWindowGist { .. } => "sliding-window-gist",
            Self::AttentionTop { .. } => "attention-top",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::NoEviction => Ok(()),
            Self::EvictOldest { window_tokens: 0 } => Err(KvSimError::InvalidArgument(
                "evict-oldest window_tokens must be positive".into(),
            )),
            Self::SlidingWindowGist {
                gist_token_count,
                recent_token_count,
            } if gist_token_count + recent_token_count == 0 => Err(KvSimError::InvalidArgument(
                "sliding-window-gist needs gist + recent > 0".into(),
            )),
            Self::AttentionTop { keep_ratio } if !(keep_ratio > 0.0 && keep_ratio <= 1.0) => Err(
                KvSimError::InvalidArgument(format!("keep_ratio must be in (0, 1], got {keep_ratio}")),
            ),
            _ => Ok(()),
        }
    }

    #[must_use]
    pub const fn needs_attention(&self) -> bool {
        matches!(self, Self::AttentionTop { .. })
    }
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoEviction => write!(f, "baseline"),
            Self::EvictOldest { window_tokens } => write!(f, "evict-oldest(window={window_tokens})"),
            Self::SlidingWindowGist {
                gist_token_count,
                recent_token_count,
            } => write!(
                f,
                "sliding-window-gist(gist={gist_token_count}, recent={recent_token_count})"
            ),
            Self::AttentionTop { keep_ratio } => write!(f, "attention-top(keep_ratio={keep_ratio})"),
        }
    }
}

/// Strategy name without parameters, as used on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Baseline,
    EvictOldest,
    SlidingWindowGist,
    AttentionTop,
}

impl FromStr for StrategyKind {
    type Err = KvSimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "evict-oldest" => Ok(Self::EvictOldest),
            "sliding-window-gist" => Ok(Self::SlidingWindowGist),
            "attention-top" => Ok(Self::AttentionTop),
            _ => Err(KvSimError::InvalidArgument(format!(
                "unknown strategy `{s}` (expected one of {})",
                EvictionPolicy::NAMES.join(", ")
            ))),
        }
    }
}

/// Attention mass each cached slot received during the most recent pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    scores: Vec<f64>,
}

impl AttentionRecord {
    #[must_use]
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    #[must_use]
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Zero-pads for slots appended after scoring.
    fn align_to(&mut self, slot_count: usize) -> Result<()> {
        if self.scores.len() > slot_count {
            return Err(KvSimError::InvalidState(format!(
                "attention record covers {} slots but the cache holds {slot_count}",
                self.scores.len()
            )));
        }
        self.scores.resize(slot_count, 0.0);
        Ok(())
    }

    fn retain_indices(&mut self, keep: &[usize]) {
        self.scores = keep.iter().map(|&i| self.scores[i]).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EvictionStats {
    pub tokens_evicted: usize,
    pub elapsed: Duration,
    pub strategy_name: &'static str,
}

/// True iff the cache strictly exceeds the threshold.
#[must_use]
pub const fn should_evict(cache_bytes: u64, threshold_bytes: u64) -> bool {
    cache_bytes > threshold_bytes
}

/// Per-slot attention mass from `step`, summed over layers, heads and query
/// rows. The previous record is replaced, not added to.
pub fn accumulate_attention(step: &StepOutput, existing: Option<&AttentionRecord>) -> Result<AttentionRecord> {
    let columns = step.attention.columns();
    if let Some(prev) = existing {
        if prev.len() > columns {
            return Err(KvSimError::InvalidState(format!(
                "step covers {columns} slots but the previous record has {}",
                prev.len()
            )));
        }
    }
    let scores = match &step.attention {
        AttentionCapture::ColumnSums(sums) => sums.clone(),
        AttentionCapture::Full(layers) => {
            let mut scores = vec![0.0; columns];
            for m in layers.iter().flatten() {
                if m.cols != columns {
                    return Err(KvSimError::InvalidState(format!(
                        "weight matrices disagree on slot count ({} vs {columns})",
                        m.cols
                    )));
                }
                for r in 0..m.rows {
                    for (s, w) in scores.iter_mut().zip(m.row(r)) {
                        *s += w;
                    }
                }
            }
            scores
        }
    };
    Ok(AttentionRecord { scores })
}

/// `⌈ratio · n⌉`, tolerant of the representation error in ratios like 0.99.
fn ceil_keep(ratio: f64, n: usize) -> usize {
    let exact = ratio * n as f64;
    let nearest = exact.round();
    let keep = if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    (keep as usize).clamp(1, n)
}

/// Sorted slot indices that survive `policy`.
pub fn select_keep_indices(
    policy: &EvictionPolicy,
    slot_count: usize,
    record: Option<&AttentionRecord>,
) -> Result<Vec<usize>> {
    policy.validate()?;
    let keep = match *policy {
        EvictionPolicy::NoEviction => (0..slot_count).collect(),
        EvictionPolicy::EvictOldest { window_tokens } => {
            (slot_count.saturating_sub(window_tokens)..slot_count).collect()
        }
        EvictionPolicy::SlidingWindowGist {
            gist_token_count,
            recent_token_count,
        } => {
            if gist_token_count + recent_token_count >= slot_count {
                (0..slot_count).collect()
            } else {
                (0..gist_token_count)
                    .chain(slot_count - recent_token_count..slot_count)
                    .collect()
            }
        }
        EvictionPolicy::AttentionTop { keep_ratio } => {
            let record =
                record.ok_or_else(|| KvSimError::InvalidArgument("attention-top needs an attention record".into()))?;
            if record.len() != slot_count {
                return Err(KvSimError::InvalidArgument(format!(
                    "attention record has {} scores for {slot_count} slots",
                    record.len()
                )));
            }
            if slot_count == 0 {
                return Ok(Vec::new());
            }
            let k = ceil_keep(keep_ratio, slot_count);
            let mut order: Vec<usize> = (0..slot_count).collect();
            // Highest score first; equal scores favour the more recent slot.
            order.sort_unstable_by(|&a, &b| record.scores[b].total_cmp(&record.scores[a]).then_with(|| b.cmp(&a)));
            order.truncate(k);
            order.sort_unstable();
            order
        }
    };
    Ok(keep)
}

/// Selects survivors, compacts `cache`, and filters `record` to match.
pub fn apply_policy(
    cache: &mut KvCache,
    policy: &EvictionPolicy,
    record: Option<&mut AttentionRecord>,
) -> Result<EvictionStats> {
    let start = Instant::now();
    let slot_count = cache.len();
    let mut record = record;
    if let Some(r) = record.as_deref_mut() {
        r.align_to(slot_count)?;
    }
    let keep = select_keep_indices(policy, slot_count, record.as_deref())?;
    let tokens_evicted = if keep.len() == slot_count {
        0
    } else {
        let compaction = cache.compact(&keep)?;
        if let Some(r) = record {
            r.retain_indices(&keep);
        }
        compaction.evicted
    };
    Ok(EvictionStats {
        tokens_evicted,
        elapsed: start.elapsed(),
        strategy_name: policy.name(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Preset};
    use crate::model::{CaptureMode, ToyModel, WeightMatrix};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_attention_heads: 1,
            num_kv_heads: 1,
            head_dim_k: 2,
            head_dim_v: 2,
            bytes_per_element: 2,
            max_position: 8192,
            rope_base: 10_000.0,
            vocab_size: 16,
            seed: 3,
        }
    }

    fn cache_with(n: usize) -> KvCache {
        let model = ToyModel::new(tiny_config()).unwrap();
        let mut cache = KvCache::new(model.config());
        let tokens: Vec<u32> = (0..n as u32).map(|t| t % 15).collect();
        model.forward(&mut cache, &tokens, CaptureMode::ColumnSums).unwrap();
        cache
    }

    fn step(layers: Vec<Vec<WeightMatrix>>) -> StepOutput {
        StepOutput {
            logits: vec![],
            attention: AttentionCapture::Full(layers),
        }
    }

    #[test]
    fn trigger_is_strict() {
        let mib600 = 600 << 20;
        assert!(!should_evict(mib600, mib600));
        assert!(should_evict(mib600 + 1, mib600));
        assert!(!should_evict(0, 0));
        assert!(!should_evict(0, 12345));
    }

    #[test]
    fn accumulate_single_row() {
        let m = WeightMatrix {
            rows: 1,
            cols: 2,
            data: vec![0.2, 0.8],
        };
        let rec = accumulate_attention(&step(vec![vec![m.clone()]]), None).unwrap();
        assert_eq!(rec.scores(), &[0.2, 0.8]);

        let doubled = accumulate_attention(&step(vec![vec![m.clone()], vec![m]]), Some(&rec)).unwrap();
        assert_eq!(doubled.scores(), &[0.4, 1.6]);
    }

    #[test]
    fn accumulate_replaces_previous_pass() {
        let m = WeightMatrix {
            rows: 1,
            cols: 3,
            data: vec![0.1, 0.1, 0.8],
        };
        let prev = AttentionRecord::new(vec![5.0, 5.0]);
        let rec = accumulate_attention(&step(vec![vec![m]]), Some(&prev)).unwrap();
        assert_eq!(rec.scores(), &[0.1, 0.1, 0.8]);
        let too_long = AttentionRecord::new(vec![0.0; 4]);
        let m = WeightMatrix {
            rows: 1,
            cols: 3,
            data: vec![0.1, 0.1, 0.8],
        };
        assert!(matches!(
            accumulate_attention(&step(vec![vec![m]]), Some(&too_long)),
            Err(KvSimError::InvalidState(_))
        ));
    }

    #[test]
    fn accumulate_prefill_matches_column_sums() {
        let model = ToyModel::new(Preset::Toy.config().with_seed(5)).unwrap();
        let mut cache = KvCache::new(model.config());
        let out = model.prefill(&mut cache, &[4, 8, 15]).unwrap();
        let rec = accumulate_attention(&out, None).unwrap();
        let AttentionCapture::Full(layers) = &out.attention else {
            panic!()
        };
        let mut brute = [0.0; 3];
        for layer in layers {
            for head in layer {
                for r in 0..3 {
                    for (j, b) in brute.iter_mut().enumerate() {
                        *b += head.data[r * 3 + j];
                    }
                }
            }
        }
        for (a, b) in rec.scores().iter().zip(brute) {
            assert!((a - b).abs() < 1e-12);
        }
        // Causal mask: only the first slot is seen by all three rows.
        assert!(rec.scores()[0] > rec.scores()[2]);
    }

    #[test]
    fn selection_examples() {
        let gist = EvictionPolicy::SlidingWindowGist {
            gist_token_count: 2000,
            recent_token_count: 0,
        };
        assert_eq!(
            select_keep_indices(&gist, 8192, None).unwrap(),
            (0..2000).collect::<Vec<_>>()
        );

        let oldest = EvictionPolicy::EvictOldest { window_tokens: 5 };
        assert_eq!(select_keep_indices(&oldest, 8, None).unwrap(), vec![3, 4, 5, 6, 7]);
        assert_eq!(select_keep_indices(&oldest, 3, None).unwrap(), vec![0, 1, 2]);

        let top = EvictionPolicy::AttentionTop { keep_ratio: 0.99 };
        let flat = AttentionRecord::new(vec![1.0; 100]);
        assert_eq!(
            select_keep_indices(&top, 100, Some(&flat)).unwrap(),
            (1..100).collect::<Vec<_>>()
        );

        let mixed = EvictionPolicy::SlidingWindowGist {
            gist_token_count: 2,
            recent_token_count: 3,
        };
        assert_eq!(select_keep_indices(&mixed, 10, None).unwrap(), vec![0, 1, 7, 8, 9]);
        assert_eq!(select_keep_indices(&mixed, 5, None).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn keep_count_uses_ceiling() {
        assert_eq!(ceil_keep(0.99, 8000), 7920);
        assert_eq!(ceil_keep(0.99, 100), 99);
        assert_eq!(ceil_keep(0.99, 101), 100);
        assert_eq!(ceil_keep(0.5, 3), 2);
        assert_eq!(ceil_keep(0.001, 5), 1);
        assert_eq!(ceil_keep(1.0, 7), 7);
    }

    #[test]
    fn attention_top_requires_record() {
        let top = EvictionPolicy::AttentionTop { keep_ratio: 0.5 };
        assert!(matches!(
            select_keep_indices(&top, 4, None),
            Err(KvSimError::InvalidArgument(_))
        ));
        let short = AttentionRecord::new(vec![1.0; 3]);
        assert!(select_keep_indices(&top, 4, Some(&short)).is_err());
    }

    #[test]
    fn invalid_policies() {
        for p in [
            EvictionPolicy::EvictOldest { window_tokens: 0 },
            EvictionPolicy::SlidingWindowGist {
                gist_token_count: 0,
                recent_token_count: 0,
            },
            EvictionPolicy::AttentionTop { keep_ratio: 0.0 },
            EvictionPolicy::AttentionTop { keep_ratio: 1.5 },
            EvictionPolicy::AttentionTop { keep_ratio: f64::NAN },
        ] {
            assert!(p.validate().is_err(), "{p}");
        }
    }

    #[test]
    fn no_eviction_leaves_cache_alone() {
        let mut cache = cache_with(12);
        let before = cache.clone();
        let stats = apply_policy(&mut cache, &EvictionPolicy::NoEviction, None).unwrap();
        assert_eq!(stats.tokens_evicted, 0);
        assert_eq!(stats.strategy_name, "baseline");
        assert_eq!(cache, before);
    }

    #[test]
    fn attention_top_on_8000_slots_evicts_80() {
        let mut cache = cache_with(8000);
        let mut rec = AttentionRecord::new((0..8000).map(|i| ((i * 7919) % 1000) as f64).collect());
        let stats = apply_policy(
            &mut cache,
            &EvictionPolicy::AttentionTop { keep_ratio: 0.99 },
            Some(&mut rec),
        )
        .unwrap();
        assert_eq!(stats.tokens_evicted, 80);
        assert_eq!(cache.len(), 7920);
        assert_eq!(cache.seen_tokens(), 7920);
        assert_eq!(rec.len(), 7920);
        assert!(rec.scores().iter().all(|&s| s >= 10.0));
    }

    #[test]
    fn gist_eviction_keeps_contiguous_prefix() {
        let mut cache = cache_with(8100);
        let policy = EvictionPolicy::SlidingWindowGist {
            gist_token_count: 2000,
            recent_token_count: 0,
        };
        let stats = apply_policy(&mut cache, &policy, None).unwrap();
        assert_eq!(stats.tokens_evicted, 6100);
        assert_eq!(cache.original_positions(), (0..2000).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn record_is_padded_for_new_slots() {
        let mut cache = cache_with(6);
        let mut rec = AttentionRecord::new(vec![9.0, 1.0, 1.0, 9.0]);
        apply_policy(
            &mut cache,
            &EvictionPolicy::AttentionTop { keep_ratio: 0.5 },
            Some(&mut rec),
        )
        .unwrap();
        // Unscored slots 4 and 5 carry zero; 1 vs 2 tie goes to the later one.
        assert_eq!(cache.original_positions(), &[0, 2, 3]);
        assert_eq!(rec.scores(), &[9.0, 1.0, 9.0]);
    }
}
