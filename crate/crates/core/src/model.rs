//! Seeded toy attention stack: embedding, `L` attention blocks with residual
//! connections, output projection. No MLPs, no normalization.
//!
//! Weights come from a `ChaCha8Rng` seeded with `ModelConfig::seed` and are
//! drawn uniformly in this order:
//!
//! 1. embedding table, `vocab × hidden`, in `[-1, 1]`;
//! 2. for each layer: `W_q` (`H·d_k × hidden`), `W_k` (`kv·d_k × hidden`),
//!    `W_v` (`kv·d_v × hidden`), `W_o` (`hidden × H·d_v`), each in
//!    `[-a, a]` with `a = sqrt(3 / fan_in)`;
//! 3. output projection, `vocab × hidden`, in `[-a, a]` with `fan_in = hidden`.
//!
//! All matrices are row-major `[out][in]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::KvCache;
use crate::config::ModelConfig;
use crate::error::{KvSimError, Result};
use crate::rope::rope_rotate_in_place;

/// Token id in the toy vocabulary.
pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

/// Row-major `rows × cols` attention weights (query rows × cached slots).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl WeightMatrix {
    #[must_use]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// How much attention detail a forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureMode {
    /// Every weight, per layer and head. Memory is `rows × slots` per head.
    Full,
    /// Only the per-slot column sums over layers, heads and query rows.
    ColumnSums,
}

/// Attention weights produced by one pass.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionCapture {
    /// `[layer][head]` matrices; masked (future) entries are zero.
    Full(Vec<Vec<WeightMatrix>>),
    ColumnSums(Vec<f64>),
}

impl AttentionCapture {
    /// Number of cached-slot columns the weights cover.
    #[must_use]
    pub fn columns(&self) -> usize {
        match self {
            Self::Full(layers) => layers.first().and_then(|heads| heads.first()).map_or(0, |m| m.cols),
            Self::ColumnSums(sums) => sums.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Logits for the last processed position.
    pub logits: Vec<f64>,
    pub attention: AttentionCapture,
}

/// Scaled dot-product attention of one query over cached rows.
///
/// Returns the weighted value sum and the softmax weights.
pub fn attend(query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys.is_empty() {
        return Err(KvSimError::InvalidState("attention over an empty cache".into()));
    }
    if keys.len() != values.len() {
        return Err(KvSimError::InvalidArgument(format!(
            "{} keys but {} values",
            keys.len(),
            values.len()
        )));
    }
    let dk = query.len();
    let dv = values[0].len();
    if keys.iter().any(|k| k.len() != dk) || values.iter().any(|v| v.len() != dv) {
        return Err(KvSimError::InvalidArgument("ragged key/value rows".into()));
    }
    let flat_k: Vec<f64> = keys.concat();
    let flat_v: Vec<f64> = values.concat();
    let mut weights = vec![0.0; keys.len()];
    let mut out = vec![0.0; dv];
    attend_flat(query, &flat_k, &flat_v, dv, &mut weights, &mut out);
    Ok((out, weights))
}

/// Attention over the first `weights.len()` rows of flat key/value buffers.
/// `out` is overwritten.
fn attend_flat(query: &[f64], keys: &[f64], values: &[f64], dv: usize, weights: &mut [f64], out: &mut [f64]) {
    let dk = query.len();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for (j, w) in weights.iter_mut().enumerate() {
        *w = dot(query, &keys[j * dk..(j + 1) * dk]) * scale;
        max = max.max(*w);
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    out.fill(0.0);
    for (j, w) in weights.iter_mut().enumerate() {
        *w /= total;
        let row = &values[j * dv..(j + 1) * dv];
        for (o, v) in out.iter_mut().zip(row) {
            *o += *w * v;
        }
    }
}

/// Index of the largest logit; ties go to the lowest token id.
#[must_use]
pub fn greedy_token(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Deterministic stand-in for a pretrained decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
    unembedding: Matrix,
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let hidden = config.hidden_size();
        let q_dim = config.num_attention_heads * config.head_dim_k;
        let k_dim = config.num_kv_heads * config.head_dim_k;
        let v_dim = config.num_kv_heads * config.head_dim_v;
        let o_in = config.num_attention_heads * config.head_dim_v;
        let bound = |fan_in: usize| (3.0 / fan_in as f64).sqrt();

        let embedding = Matrix::random(&mut rng, config.vocab_size, hidden, 1.0);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: Matrix::random(&mut rng, q_dim, hidden, bound(hidden)),
                wk: Matrix::random(&mut rng, k_dim, hidden, bound(hidden)),
                wv: Matrix::random(&mut rng, v_dim, hidden, bound(hidden)),
                wo: Matrix::random(&mut rng, hidden, o_in, bound(o_in)),
            })
            .collect();
        let unembedding = Matrix::random(&mut rng, config.vocab_size, hidden, bound(hidden));
        Ok(Self {
            config,
            embedding,
            layers,
            unembedding,
        })
    }

    #[must_use]
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(KvSimError::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(KvSimError::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        self.unembedding.matvec(hidden)
    }

    /// Processes `tokens` against `cache`, appending one slot per token.
    pub fn prefill(&self, cache: &mut KvCache, tokens: &[TokenId]) -> Result<StepOutput> {
        self.forward(cache, tokens, CaptureMode::Full)
    }

    /// Processes a single generated token.
    pub fn decode_step(&self, cache: &mut KvCache, token: TokenId) -> Result<StepOutput> {
        self.forward(cache, &[token], CaptureMode::Full)
    }

    /// Shared cached forward pass.
    ///
    /// Token `i` is rotated to absolute position `seen_tokens + i` and attends
    /// causally to every committed slot plus new tokens `0..=i`.
    pub fn forward(&self, cache: &mut KvCache, tokens: &[TokenId], capture: CaptureMode) -> Result<StepOutput> {
        self.check_tokens(tokens)?;
        cache.check_geometry(&self.config)?;

        let cfg = &self.config;
        let (dk, dv) = (cfg.head_dim_k, cfg.head_dim_v);
        let n = tokens.len();
        let base = cache.len();
        let start_pos = cache.seen_tokens();
        let total = base + n;

        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embedding.row(t as usize).to_vec())
            .collect();

        let mut full: Vec<Vec<WeightMatrix>> = Vec::new();
        let mut column_sums = match capture {
            CaptureMode::ColumnSums => vec![0.0; total],
            CaptureMode::Full => Vec::new(),
        };

        let mut weights = vec![0.0; total];
        let mut head_out = vec![0.0; dv];
        for (layer_idx, layer) in self.layers.iter().enumerate() {
            for (i, x) in xs.iter().enumerate() {
                let k = layer.wk.matvec(x);
                let v = layer.wv.matvec(x);
                for h in 0..cfg.num_kv_heads {
                    let mut key = k[h * dk..(h + 1) * dk].to_vec();
                    rope_rotate_in_place(&mut key, start_pos + i, cfg.rope_base)?;
                    cache.push_row(layer_idx, h, &key, &v[h * dv..(h + 1) * dv]);
                }
            }
            debug_assert_eq!(cache.layer_slots(layer_idx), total);

            let mut layer_mats: Vec<WeightMatrix> = match capture {
                CaptureMode::Full => (0..cfg.num_attention_heads)
                    .map(|_| WeightMatrix {
                        rows: n,
                        cols: total,
                        data: vec![0.0; n * total],
                    })
                    .collect(),
                CaptureMode::ColumnSums => Vec::new(),
            };

            for (i, x) in xs.iter_mut().enumerate() {
                let visible = base + i + 1;
                let q = layer.wq.matvec(x);
                let mut concat = Vec::with_capacity(cfg.num_attention_heads * dv);
                for h in 0..cfg.num_attention_heads {
                    let kvh = cfg.kv_head_for(h);
                    let mut query = q[h * dk..(h + 1) * dk].to_vec();
                    rope_rotate_in_place(&mut query, start_pos + i, cfg.rope_base)?;
                    let w = &mut weights[..visible];
                    attend_flat(
                        &query,
                        cache.keys(layer_idx, kvh),
                        cache.values(layer_idx, kvh),
                        dv,
                        w,
                        &mut head_out,
                    );
                    match capture {
                        CaptureMode::Full => {
                            layer_mats[h].data[i * total..i * total + visible].copy_from_slice(w);
                        }
                        CaptureMode::ColumnSums => {
                            for (s, wj) in column_sums.iter_mut().zip(w.iter()) {
                                *s += wj;
                            }
                        }
                    }
                    concat.extend_from_slice(&head_out);
                }
                let o = layer.wo.matvec(&concat);
                for (xi, oi) in x.iter_mut().zip(&o) {
                    *xi += oi;
                }
            }
            if capture == CaptureMode::Full {
                full.push(layer_mats);
            }
        }
        cache.commit(n)?;

        let logits = self.logits(xs.last().expect("non-empty tokens"));
        let attention = match capture {
            CaptureMode::Full => AttentionCapture::Full(full),
            CaptureMode::ColumnSums => AttentionCapture::ColumnSums(column_sums),
        };
        Ok(StepOutput { logits, attention })
    }

    /// Cache-free causal recomputation over positions `0..n`; returns the
    /// logits at every position. Quadratic reference path for tests.
    pub fn full_recompute(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (dk, dv) = (cfg.head_dim_k, cfg.head_dim_v);
        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embedding.row(t as usize).to_vec())
            .collect();

        for layer in &self.layers {
            let mut qs = Vec::new();
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            for (pos, x) in xs.iter().enumerate() {
                let mut q = layer.wq.matvec(x);
                for chunk in q.chunks_mut(dk) {
                    rope_rotate_in_place(chunk, pos, cfg.rope_base)?;
                }
                let mut k = layer.wk.matvec(x);
                for chunk in k.chunks_mut(dk) {
                    rope_rotate_in_place(chunk, pos, cfg.rope_base)?;
                }
                qs.push(q);
                ks.push(k);
                vs.push(layer.wv.matvec(x));
            }

            let mut next = xs.clone();
            for pos in 0..xs.len() {
                let mut concat = Vec::new();
                for h in 0..cfg.num_attention_heads {
                    let kvh = cfg.kv_head_for(h);
                    let query = &qs[pos][h * dk..(h + 1) * dk];
                    let scores: Vec<f64> = (0..=pos)
                        .map(|j| dot(query, &ks[j][kvh * dk..(kvh + 1) * dk]) / (dk as f64).sqrt())
                        .collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let mut out = vec![0.0; dv];
                    for (j, e) in exps.iter().enumerate() {
                        for (o, v) in out.iter_mut().zip(&vs[j][kvh * dv..(kvh + 1) * dv]) {
                            *o += e / z * v;
                        }
                    }
                    concat.extend(out);
                }
                for (xi, oi) in next[pos].iter_mut().zip(layer.wo.matvec(&concat)) {
                    *xi += oi;
                }
            }
            xs = next;
        }
        Ok(xs.iter().map(|x| self.logits(x)).collect())
    }
}
