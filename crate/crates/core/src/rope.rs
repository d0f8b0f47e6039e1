//! Rotary positional embeddings.
//!
//! Feature pair `(v[2i], v[2i+1])` is rotated by `position · θ_i` with
//! `θ_i = base^(−2i/len)`, so the inner product of a rotated query and key
//! depends only on the distance between their positions.

use crate::error::{KvSimError, Result};

/// Returns `v` rotated to absolute `position`.
pub fn rope_rotate(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    rope_rotate_in_place(&mut out, position, base)?;
    Ok(out)
}

/// In-place variant of [`rope_rotate`].
pub fn rope_rotate_in_place(v: &mut [f64], position: usize, base: f64) -> Result<()> {
    if !v.len().is_multiple_of(2) {
        return Err(KvSimError::InvalidArgument(format!(
            "RoPE needs an even-length vector, got length {}",
            v.len()
        )));
    }
    if position == 0 {
        return Ok(());
    }
    let dim = v.len() as f64;
    for (i, pair) in v.chunks_exact_mut(2).enumerate() {
        let theta = base.powf(-2.0 * i as f64 / dim);
        let (sin, cos) = (position as f64 * theta).sin_cos();
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * cos - x1 * sin;
        pair[1] = x0 * sin + x1 * cos;
    }
    Ok(())
}
