//! Position IDs and rotary position embeddings.
//!
//! Rotation convention: interleaved pairs. Dimension pair `(2j, 2j+1)`
//! of a head vector is rotated by the angle `id * theta_base^(-2j/head_dim)`.
//! All equivalence oracles in this crate assume this pairing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, Matrix};

/// Ordered list of non-negative position indices, one per token.
///
/// Values need not be contiguous; realigned pruning deliberately produces
/// ids that exceed the pruned sequence length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionIds(pub Vec<usize>);

impl PositionIds {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> Option<usize> {
        self.0.iter().copied().max()
    }

    pub fn concat(&self, other: &PositionIds) -> PositionIds {
        let mut ids = self.0.clone();
        ids.extend_from_slice(&other.0);
        PositionIds(ids)
    }
}

/// Rotary embedding parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta_base: f64,
    pub num_heads: usize,
}

impl RopeConfig {
    pub fn new(head_dim: usize, num_heads: usize) -> Self {
        RopeConfig { head_dim, theta_base: 10000.0, num_heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim must be a positive even number, got {}",
                self.head_dim
            )));
        }
        if !(self.theta_base > 1.0) {
            return Err(Error::config("theta_base must be > 1"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be positive"));
        }
        Ok(())
    }

    /// Angular frequency for dimension pair `j`.
    pub fn freq(&self, j: usize) -> f64 {
        self.theta_base.powf(-2.0 * j as f64 / self.head_dim as f64)
    }
}

/// `[start, start+1, ..., start+count-1]`.
pub fn sequential_ids(start: usize, count: usize) -> PositionIds {
    PositionIds((start..start + count).collect())
}

/// Rotate each pair of a single head vector in place by position `id`.
pub fn rotate_in_place(v: &mut [f64], id: usize, cfg: &RopeConfig) {
    debug_assert_eq!(v.len(), cfg.head_dim);
    for j in 0..cfg.head_dim / 2 {
        let angle = id as f64 * cfg.freq(j);
        let (sin, cos) = angle.sin_cos();
        let a = v[2 * j];
        let b = v[2 * j + 1];
        v[2 * j] = a * cos - b * sin;
        v[2 * j + 1] = a * sin + b * cos;
    }
}

/// Inverse rotation: undoes [`rotate_in_place`] for the same `id`.
/// Used when backpropagating through a rotation.
pub fn rotate_in_place_inverse(v: &mut [f64], id: usize, cfg: &RopeConfig) {
    debug_assert_eq!(v.len(), cfg.head_dim);
    for j in 0..cfg.head_dim / 2 {
        let angle = id as f64 * cfg.freq(j);
        let (sin, cos) = angle.sin_cos();
        let a = v[2 * j];
        let b = v[2 * j + 1];
        v[2 * j] = a * cos + b * sin;
        v[2 * j + 1] = -a * sin + b * cos;
    }
}

/// Apply the rotary embedding to a matrix of per-token head vectors.
///
/// Row `i` is rotated by `ids[i]`. Rotations are isometries, so per-row
/// L2 norms are preserved.
pub fn apply_rope(x: &Matrix, ids: &PositionIds, cfg: &RopeConfig) -> Result<Matrix> {
    cfg.validate()?;
    if x.rows() != ids.len() {
        return Err(Error::shape(format!(
            "apply_rope: {} rows but {} position ids",
            x.rows(),
            ids.len()
        )));
    }
    if x.cols() != cfg.head_dim {
        return Err(Error::shape(format!(
            "apply_rope: {} cols but head_dim {}",
            x.cols(),
            cfg.head_dim
        )));
    }
    let mut out = x.clone();
    for (i, &id) in ids.0.iter().enumerate() {
        rotate_in_place(out.row_mut(i), id, cfg);
    }
    Ok(out)
}

/// Pre-softmax attention logit between a query at position `m` and a key
/// at position `n` (no 1/sqrt(d) scaling).
///
/// Depends only on `m - n`: rotating both positions by the same offset
/// leaves the value unchanged, which is the relative-position property
/// misaligned pruning breaks.
pub fn rope_logit(q: &[f64], k: &[f64], m: usize, n: usize, cfg: &RopeConfig) -> f64 {
    debug_assert_eq!(q.len(), cfg.head_dim);
    debug_assert_eq!(k.len(), cfg.head_dim);
    let mut qr = q.to_vec();
    let mut kr = k.to_vec();
    rotate_in_place(&mut qr, m, cfg);
    rotate_in_place(&mut kr, n, cfg);
    dot(&qr, &kr)
}
