//! Dynamic key/value store with byte accounting and index-based compaction.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{KvSimError, Result};

/// Bytes in one mebibyte; all MB figures in this crate are MiB.
pub const MIB: u64 = 1 << 20;

/// Memory taken by a cache of a given length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub elements: u64,
    pub bytes: u64,
    pub megabytes: f64,
}

/// `2 · L · kv_heads · T · d_k` elements at `bytes_per_element` each.
///
/// Uses the KV-head count, which is what a grouped-query model physically
/// stores, and assumes `d_v = d_k`.
#[must_use]
pub fn footprint(config: &ModelConfig, num_tokens: usize) -> FootprintReport {
    let elements = config.elements_per_token() * num_tokens as u64;
    let bytes = elements * config.bytes_per_element as u64;
    FootprintReport {
        elements,
        bytes,
        megabytes: bytes_to_mib(bytes),
    }
}

#[must_use]
pub fn bytes_to_mib(bytes: u64) -> f64 {
    bytes as f64 / MIB as f64
}

/// Bytes for `megabytes` MiB, rounded to the nearest byte.
#[must_use]
pub fn mib_to_bytes(megabytes: f64) -> u64 {
    (megabytes * MIB as f64).round() as u64
}

/// Keys and values of one layer, one flat `slots × dim` buffer per KV head.
#[derive(Debug, Clone, PartialEq)]
struct LayerKv {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Outcome of a [`KvCache::compact`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Compaction {
    pub evicted: usize,
    pub elapsed: Duration,
}

/// Per-layer, per-KV-head cached keys (stored post-RoPE) and values.
///
/// `original_positions[i]` is the absolute position whose rotation slot `i`
/// carries. Compaction keeps those rotations, so after a non-suffix eviction
/// the next appended token (at `seen_tokens`) can land below survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    num_kv_heads: usize,
    head_dim_k: usize,
    head_dim_v: usize,
    layers: Vec<LayerKv>,
    seen_tokens: usize,
    original_positions: Vec<usize>,
}

impl KvCache {
    #[must_use]
    pub fn new(config: &ModelConfig) -> Self {
        let layer = LayerKv {
            keys: vec![Vec::new(); config.num_kv_heads],
            values: vec![Vec::new(); config.num_kv_heads],
        };
        Self {
            num_kv_heads: config.num_kv_heads,
            head_dim_k: config.head_dim_k,
            head_dim_v: config.head_dim_v,
            layers: vec![layer; config.num_layers],
            seen_tokens: 0,
            original_positions: Vec::new(),
        }
    }

    /// Committed slot count.
    #[must_use]
    pub fn len(&self) -> usize {
        self.original_positions.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.original_positions.is_empty()
    }

    /// Absolute position the next appended token will be rotated to.
    #[must_use]
    pub fn seen_tokens(&self) -> usize {
        self.seen_tokens
    }

    #[must_use]
    pub fn original_positions(&self) -> &[usize] {
        &self.original_positions
    }

    #[must_use]
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    #[must_use]
    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    #[must_use]
    pub fn head_dim_k(&self) -> usize {
        self.head_dim_k
    }

    #[must_use]
    pub fn head_dim_v(&self) -> usize {
        self.head_dim_v
    }

    /// Flat `slots × d_k` key buffer, including rows appended by an
    /// in-progress prefill.
    #[must_use]
    pub fn keys(&self, layer: usize, kv_head: usize) -> &[f64] {
        &self.layers[layer].keys[kv_head]
    }

    #[must_use]
    pub fn values(&self, layer: usize, kv_head: usize) -> &[f64] {
        &self.layers[layer].values[kv_head]
    }

    #[must_use]
    pub fn key(&self, layer: usize, kv_head: usize, slot: usize) -> &[f64] {
        let d = self.head_dim_k;
        &self.layers[layer].keys[kv_head][slot * d..(slot + 1) * d]
    }

    #[must_use]
    pub fn value(&self, layer: usize, kv_head: usize, slot: usize) -> &[f64] {
        let d = self.head_dim_v;
        &self.layers[layer].values[kv_head][slot * d..(slot + 1) * d]
    }

    /// Slots physically present in one layer (committed plus pending).
    pub(crate) fn layer_slots(&self, layer: usize) -> usize {
        self.layers[layer].keys[0].len() / self.head_dim_k
    }

    pub(crate) fn push_row(&mut self, layer: usize, kv_head: usize, key: &[f64], value: &[f64]) {
        debug_assert_eq!(key.len(), self.head_dim_k);
        debug_assert_eq!(value.len(), self.head_dim_v);
        let l = &mut self.layers[layer];
        l.keys[kv_head].extend_from_slice(key);
        l.values[kv_head].extend_from_slice(value);
    }

    /// Records `n` rows already pushed to every layer as positions
    /// `seen_tokens .. seen_tokens + n`.
    pub(crate) fn commit(&mut self, n: usize) -> Result<()> {
        let expected = self.len() + n;
        for layer in 0..self.layers.len() {
            for h in 0..self.num_kv_heads {
                let l = &self.layers[layer];
                if l.keys[h].len() != expected * self.head_dim_k || l.values[h].len() != expected * self.head_dim_v {
                    return Err(KvSimError::InvalidState(format!(
                        "layer {layer} head {h} does not hold {expected} slots"
                    )));
                }
            }
        }
        let start = self.seen_tokens;
        self.original_positions.extend(start..start + n);
        self.seen_tokens += n;
        Ok(())
    }

    /// Rebuilds every layer from the rows at `keep_indices` (in order) and
    /// sets `seen_tokens` to the new length.
    pub fn compact(&mut self, keep_indices: &[usize]) -> Result<Compaction> {
        let start = Instant::now();
        let len = self.len();
        for (i, &idx) in keep_indices.iter().enumerate() {
            if idx >= len {
                return Err(KvSimError::InvalidArgument(format!(
                    "keep index {idx} out of range for {len} slots"
                )));
            }
            if i > 0 && keep_indices[i - 1] >= idx {
                return Err(KvSimError::InvalidArgument(format!(
                    "keep indices must be strictly increasing (saw {} then {idx})",
                    keep_indices[i - 1]
                )));
            }
        }

        let (dk, dv) = (self.head_dim_k, self.head_dim_v);
        let gather = |src: &[f64], dim: usize| {
            let mut out = Vec::with_capacity(keep_indices.len() * dim);
            for &idx in keep_indices {
                out.extend_from_slice(&src[idx * dim..(idx + 1) * dim]);
            }
            out
        };
        for layer in &mut self.layers {
            layer.keys = layer.keys.iter().map(|k| gather(k, dk)).collect();
            layer.values = layer.values.iter().map(|v| gather(v, dv)).collect();
        }
        self.original_positions = keep_indices.iter().map(|&i| self.original_positions[i]).collect();
        self.seen_tokens = keep_indices.len();

        Ok(Compaction {
            evicted: len - keep_indices.len(),
            elapsed: start.elapsed(),
        })
    }

    /// Checks that this cache was built for `config`'s geometry.
    pub fn check_geometry(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers
            || self.num_kv_heads != config.num_kv_heads
            || self.head_dim_k != config.head_dim_k
            || self.head_dim_v != config.head_dim_v
        {
            return Err(KvSimError::InvalidState(format!(
                "cache geometry (L={}, kv_heads={}, d_k={}, d_v={}) does not match config \
                 (L={}, kv_heads={}, d_k={}, d_v={})",
                self.layers.len(),
                self.num_kv_heads,
                self.head_dim_k,
                self.head_dim_v,
                config.num_layers,
                config.num_kv_heads,
                config.head_dim_k,
                config.head_dim_v
            )));
        }
        Ok(())
    }
}

/// Exact byte size of `cache` under `config`.
pub fn current_bytes(cache: &KvCache, config: &ModelConfig) -> Result<u64> {
    cache.check_geometry(config)?;
    Ok(footprint(config, cache.len()).bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use proptest::prelude::*;

    fn filled(n: usize) -> KvCache {
        let cfg = Preset::Toy.config();
        let mut cache = KvCache::new(&cfg);
        for t in 0..n {
            for layer in 0..cfg.num_layers {
                for h in 0..cfg.num_kv_heads {
                    let k = vec![t as f64 + 0.25 * h as f64; cfg.head_dim_k];
                    let v = vec![-(t as f64) - layer as f64; cfg.head_dim_v];
                    cache.push_row(layer, h, &k, &v);
                }
            }
            cache.commit(1).unwrap();
        }
        cache
    }

    #[test]
    fn footprint_examples() {
        let llama2 = Preset::Llama2_7b.config();
        assert_eq!(footprint(&llama2, 2048).bytes, 1_073_741_824);

        let llama3 = Preset::Llama3_8b.config();
        let r = footprint(&llama3, 8192);
        assert_eq!(r.bytes, 1_073_741_824);
        assert_eq!(r.megabytes, 1024.0);
        assert_eq!(r.bytes, r.elements * 2);

        assert_eq!(footprint(&llama3, 0).bytes, 0);
        assert_eq!(footprint(&llama3, 4800).megabytes, 600.0);
    }

    #[test]
    fn current_bytes_tracks_slots() {
        let cfg = Preset::Toy.config();
        assert_eq!(current_bytes(&KvCache::new(&cfg), &cfg).unwrap(), 0);
        let cache = filled(7);
        assert_eq!(current_bytes(&cache, &cfg).unwrap(), 7 * cfg.bytes_per_token());
        assert!(matches!(
            current_bytes(&cache, &Preset::Llama3_8b.config()),
            Err(KvSimError::InvalidState(_))
        ));
    }

    #[test]
    fn compact_full_set_is_identity() {
        let mut cache = filled(10);
        let before = cache.clone();
        let c = cache.compact(&(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(c.evicted, 0);
        assert_eq!(cache, before);
    }

    #[test]
    fn compact_prefix() {
        let mut cache = filled(10);
        let c = cache.compact(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(c.evicted, 5);
        assert_eq!(cache.len(), 5);
        assert_eq!(cache.seen_tokens(), 5);
        assert_eq!(cache.original_positions(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn compact_gaps_put_next_position_below_survivor() {
        let mut cache = filled(5);
        cache.compact(&[0, 2, 4]).unwrap();
        assert_eq!(cache.original_positions(), &[0, 2, 4]);
        assert_eq!(cache.key(0, 1, 2), filled(5).key(0, 1, 4));
        assert_eq!(cache.value(1, 0, 1), filled(5).value(1, 0, 2));
        // Next token is rotated to position 3 while a survivor carries 4.
        assert_eq!(cache.seen_tokens(), 3);
        let cfg = Preset::Toy.config();
        for layer in 0..cfg.num_layers {
            for h in 0..cfg.num_kv_heads {
                cache.push_row(layer, h, &[0.0; 16], &[0.0; 16]);
            }
        }
        cache.commit(1).unwrap();
        assert_eq!(cache.original_positions(), &[0, 2, 4, 3]);
    }

    #[test]
    fn compact_rejects_bad_indices() {
        let mut cache = filled(4);
        assert!(matches!(cache.compact(&[0, 4]), Err(KvSimError::InvalidArgument(_))));
        assert!(matches!(cache.compact(&[2, 1]), Err(KvSimError::InvalidArgument(_))));
        assert!(matches!(cache.compact(&[1, 1]), Err(KvSimError::InvalidArgument(_))));
        assert_eq!(cache.len(), 4);
    }

    #[test]
    fn commit_detects_ragged_layers() {
        let cfg = Preset::Toy.config();
        let mut cache = KvCache::new(&cfg);
        cache.push_row(0, 0, &[0.0; 16], &[0.0; 16]);
        assert!(matches!(cache.commit(1), Err(KvSimError::InvalidState(_))));
        assert_eq!(cache.len(), 0);
    }

    fn subset(len: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(any::<bool>(), len)
            .prop_map(|mask| mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
    }

    proptest! {
        #[test]
        fn footprint_is_linear(t in 0usize..100_000) {
            for p in Preset::ALL {
                let cfg = p.config();
                prop_assert_eq!(footprint(&cfg, 2 * t).bytes, 2 * footprint(&cfg, t).bytes);
            }
        }

        #[test]
        fn nested_compaction_composes(outer in subset(24), inner_mask in prop::collection::vec(any::<bool>(), 24)) {
            let inner: Vec<usize> = (0..outer.len()).filter(|&i| inner_mask[i]).collect();
            let composed: Vec<usize> = inner.iter().map(|&i| outer[i]).collect();

            let mut twice = filled(24);
            twice.compact(&outer).unwrap();
            twice.compact(&inner).unwrap();

            let mut once = filled(24);
            let c = once.compact(&composed).unwrap();
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(once.seen_tokens(), once.len());
            prop_assert_eq!(c.evicted, 24 - composed.len());

            let cfg = Preset::Toy.config();
            prop_assert_eq!(
                current_bytes(&once, &cfg).unwrap(),
                (24 - c.evicted) as u64 * cfg.bytes_per_token()
            );
            prop_assert!(once.original_positions().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
