//! Positional-fidelity metrics over the original positions of cached slots.
//!
//! Slot `i` of a compacted cache is effectively at position `i` (the next
//! token goes to `seen_tokens == len`), while its key still carries the
//! rotation for `original_positions[i]`. The metrics below measure how far
//! those two disagree.

use serde::{Deserialize, Serialize};

use crate::error::{KvSimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalDiagnostics {
    /// Adjacent slot pairs whose original positions are not consecutive.
    pub discontinuities: usize,
    /// Largest number of positions missing between two neighbours.
    pub max_gap: usize,
    /// Fraction of adjacent pairs that are consecutive.
    pub contiguity_ratio: f64,
    /// Slots rotated at or beyond the architectural context window.
    pub extrapolated_slots: usize,
    /// Mean `|original distance − 1|` over adjacent pairs.
    pub mean_distance_distortion: f64,
    /// Adjacent pairs where the later slot carries a position no greater than
    /// the earlier one. Only appends after a non-suffix eviction produce these.
    pub inversions: usize,
}

impl Default for PositionalDiagnostics {
    fn default() -> Self {
        Self {
            discontinuities: 0,
            max_gap: 0,
            contiguity_ratio: 1.0,
            extrapolated_slots: 0,
            mean_distance_distortion: 0.0,
            inversions: 0,
        }
    }
}

/// Gap statistics for a strictly increasing position sequence.
pub fn gap_stats(original_positions: &[usize], max_position: usize) -> Result<PositionalDiagnostics> {
    if let Some(w) = original_positions.windows(2).find(|w| w[0] >= w[1]) {
        return Err(KvSimError::InvalidArgument(format!(
            "positions must be strictly increasing (saw {} then {})",
            w[0], w[1]
        )));
    }
    Ok(diagnose(original_positions, max_position))
}

/// Like [`gap_stats`] but accepts any order, as found in a cache that took
/// appends after a gapped compaction. Out-of-order pairs count as
/// discontinuities and inversions; their gap is not counted in `max_gap`.
#[must_use]
pub fn diagnose(original_positions: &[usize], max_position: usize) -> PositionalDiagnostics {
    let extrapolated_slots = original_positions.iter().filter(|&&p| p >= max_position).count();
    let pairs = original_positions.len().saturating_sub(1);
    if pairs == 0 {
        return PositionalDiagnostics {
            extrapolated_slots,
            ..PositionalDiagnostics::default()
        };
    }

    let mut d = PositionalDiagnostics {
        extrapolated_slots,
        ..PositionalDiagnostics::default()
    };
    let mut contiguous = 0usize;
    let mut distortion = 0u64;
    for w in original_positions.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b == a + 1 {
            contiguous += 1;
            continue;
        }
        d.discontinuities += 1;
        if b > a {
            d.max_gap = d.max_gap.max(b - a - 1);
            distortion += (b - a - 1) as u64;
        } else {
            d.inversions += 1;
            distortion += (a - b + 1) as u64;
        }
    }
    d.contiguity_ratio = contiguous as f64 / pairs as f64;
    d.mean_distance_distortion = distortion as f64 / pairs as f64;
    d
}

/// Survivors whose original position is at or above the next position the
/// model will assign (`seen_tokens`). Nonzero after any eviction that removed
/// a token before the last survivor.
#[must_use]
pub fn position_collisions(original_positions: &[usize], seen_tokens: usize) -> usize {
    original_positions.iter().filter(|&&p| p >= seen_tokens).count()
}

/// Aggregate of one run's per-turn diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub turns: usize,
    pub max_discontinuities: usize,
    pub max_gap: usize,
    /// 1-based turn at which a slot first sat beyond the context window.
    pub first_extrapolation_turn: Option<usize>,
    pub mean_contiguity: Option<f64>,
    pub mean_distance_distortion: Option<f64>,
}

/// Folds per-turn diagnostics (turn 1 first) into a run summary.
#[must_use]
pub fn fidelity_timeline(per_turn: &[PositionalDiagnostics]) -> FidelitySummary {
    let n = per_turn.len();
    let mean = |f: fn(&PositionalDiagnostics) -> f64| (n > 0).then(|| per_turn.iter().map(f).sum::<f64>() / n as f64);
    FidelitySummary {
        turns: n,
        max_discontinuities: per_turn.iter().map(|d| d.discontinuities).max().unwrap_or(0),
        max_gap: per_turn.iter().map(|d| d.max_gap).max().unwrap_or(0),
        first_extrapolation_turn: per_turn.iter().position(|d| d.extrapolated_slots > 0).map(|i| i + 1),
        mean_contiguity: mean(|d| d.contiguity_ratio),
        mean_distance_distortion: mean(|d| d.mean_distance_distortion),
    }
}
