//! Per-turn CSV and JSON summary output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cache::bytes_to_mib;
use crate::diagnostics::{fidelity_timeline, FidelitySummary};
use crate::error::{KvSimError, Result};
use crate::eviction::EvictionPolicy;
use crate::harness::run::TurnMetrics;

/// CSV header, in column order. `sim_` columns are wall-clock timings of the
/// simulator process and are excluded from determinism checks.
pub const CSV_COLUMNS: [&str; 17] = [
    "run_id",
    "strategy",
    "turn",
    "cache_mb_pre_turn",
    "tokens_evicted",
    "sim_eviction_ms",
    "cache_mb_post_prefill",
    "cache_mb_end_generation",
    "sim_ttft_ms",
    "generated_tokens",
    "sim_tokens_per_s",
    "seen_tokens_end",
    "discontinuities",
    "max_gap",
    "contiguity_ratio",
    "extrapolated_slots",
    "mean_distance_distortion",
];

/// Metrics of one conversation under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub policy: EvictionPolicy,
    pub metrics: Vec<TurnMetrics>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    strategy: &'static str,
    policy: &'a EvictionPolicy,
    turns: usize,
    total_tokens_evicted: usize,
    total_generated_tokens: usize,
    final_cache_mb: f64,
    max_cache_mb_end_generation: f64,
    mean_cache_mb_end_generation: Option<f64>,
    mean_sim_ttft_ms: Option<f64>,
    mean_sim_tokens_per_s: Option<f64>,
    total_sim_eviction_ms: f64,
    fidelity: FidelitySummary,
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = values.len();
    (n > 0).then(|| values.sum::<f64>() / n as f64)
}

fn summarize(run: &RunReport) -> RunSummary<'_> {
    let m = &run.metrics;
    let positional: Vec<_> = m.iter().map(|t| t.positional).collect();
    RunSummary {
        strategy: run.policy.name(),
        policy: &run.policy,
        turns: m.len(),
        total_tokens_evicted: m.iter().map(TurnMetrics::tokens_evicted).sum(),
        total_generated_tokens: m.iter().map(|t| t.generated_tokens).sum(),
        final_cache_mb: m.last().map_or(0.0, |t| bytes_to_mib(t.cache_bytes_end_generation)),
        max_cache_mb_end_generation: m
            .iter()
            .map(|t| bytes_to_mib(t.cache_bytes_end_generation))
            .fold(0.0, f64::max),
        mean_cache_mb_end_generation: mean(m.iter().map(|t| bytes_to_mib(t.cache_bytes_end_generation))),
        mean_sim_ttft_ms: mean(m.iter().map(|t| ms(t.ttft_elapsed))),
        mean_sim_tokens_per_s: mean(m.iter().map(|t| t.throughput_tokens_per_second)),
        total_sim_eviction_ms: m.iter().map(|t| ms(t.eviction_elapsed)).sum(),
        fidelity: fidelity_timeline(&positional),
    }
}

fn csv_error(e: csv::Error) -> KvSimError {
    KvSimError::InvalidState(format!("CSV encoding failed: {e}"))
}

/// Renders the per-turn CSV for `runs`, one row per turn.
pub fn metrics_csv(runs: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_error)?;
    for run in runs {
        for t in &run.metrics {
            let p = &t.positional;
            w.write_record([
                run.run_id.clone(),
                run.policy.name().to_string(),
                t.turn_index.to_string(),
                bytes_to_mib(t.cache_bytes_pre_turn).to_string(),
                t.tokens_evicted().to_string(),
                format!("{:.3}", ms(t.eviction_elapsed)),
                bytes_to_mib(t.cache_bytes_post_prefill).to_string(),
                bytes_to_mib(t.cache_bytes_end_generation).to_string(),
                format!("{:.3}", ms(t.ttft_elapsed)),
                t.generated_tokens.to_string(),
                format!("{:.1}", t.throughput_tokens_per_second),
                t.seen_tokens_end.to_string(),
                p.discontinuities.to_string(),
                p.max_gap.to_string(),
                p.contiguity_ratio.to_string(),
                p.extrapolated_slots.to_string(),
                p.mean_distance_distortion.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| KvSimError::InvalidState(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| KvSimError::InvalidState(e.to_string()))
}

/// JSON summary keyed by `run_id`.
pub fn summary_json(runs: &[RunReport]) -> Result<String> {
    let map: BTreeMap<&str, RunSummary<'_>> = runs.iter().map(|r| (r.run_id.as_str(), summarize(r))).collect();
    serde_json::to_string_pretty(&map).map_err(|e| KvSimError::InvalidState(e.to_string()))
}

/// Drops every `sim_` column so two CSVs can be compared for determinism.
#[must_use]
pub fn strip_timing_columns(csv_text: &str) -> String {
    let mut lines = csv_text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|c| !c.starts_with("sim_")).collect();
    let filter = |line: &str| {
        line.split(',')
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(f, _)| f)
            .collect::<Vec<_>>()
            .join(",")
    };
    std::iter::once(header)
        .chain(lines)
        .map(filter)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>_summary.json`.
pub fn emit_report(dir: &Path, stem: &str, runs: &[RunReport]) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| KvSimError::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let summary = dir.join(format!("{stem}_summary.json"));
    fs::write(&csv, metrics_csv(runs)?).map_err(|e| KvSimError::io(&csv, e))?;
    fs::write(&summary, summary_json(runs)?).map_err(|e| KvSimError::io(&summary, e))?;
    Ok(ReportFiles { csv, summary })
}
