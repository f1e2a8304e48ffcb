//! Low-rank adapters over the attention projections. An adapter targets
//! one projection matrix of one head in one layer; the head index is a
//! refinement over the (projection, layer) addressing because every
//! head owns its own d-by-k projection here.

use super::ModelError;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjectionKind {
    Q,
    K,
    V,
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectionKind::Q => write!(f, "Q"),
            ProjectionKind::K => write!(f, "K"),
            ProjectionKind::V => write!(f, "V"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub layer: usize,
    pub head: usize,
    pub kind: ProjectionKind,
    pub rank: usize,
    pub alpha: f64,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraAdapter {
    /// Fresh adapter for a d-by-k projection: A is seeded gaussian with
    /// standard deviation 1/sqrt(rank), B starts at zero so the initial
    /// update is exactly zero.
    pub fn init(
        layer: usize,
        head: usize,
        kind: ProjectionKind,
        d: usize,
        k: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        let limit = d.min(k) / 2;
        if rank == 0 || rank > limit {
            return Err(ModelError::RankTooLarge { rank, limit });
        }
        let std = 1.0 / (rank as f64).sqrt();
        let a = Array2::from_shape_fn((d, rank), |_| gaussian(rng) * std);
        let b = Array2::zeros((rank, k));
        Ok(LoraAdapter {
            layer,
            head,
            kind,
            rank,
            alpha,
            a,
            b,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable parameters: (d + k) * r for a d-by-k target.
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms; clamped away from zero for the log.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The low-rank update (alpha / r) * A * B.
pub fn lora_delta(adapter: &LoraAdapter) -> Result<Array2<f64>, ModelError> {
    if adapter.a.ncols() != adapter.rank || adapter.b.nrows() != adapter.rank {
        return Err(ModelError::ShapeMismatch {
            op: "lora_delta",
            expected: format!("inner dimension {}", adapter.rank),
            got: format!("A {:?}, B {:?}", adapter.a.dim(), adapter.b.dim()),
        });
    }
    Ok(adapter.scale() * adapter.a.dot(&adapter.b))
}

/// W' = W + delta. The base matrix is untouched; calling this twice
/// with the same adapter adds the update twice.
pub fn merge_adapter(w: &Array2<f64>, adapter: &LoraAdapter) -> Result<Array2<f64>, ModelError> {
    let delta = lora_delta(adapter)?;
    if w.dim() != delta.dim() {
        return Err(ModelError::ShapeMismatch {
            op: "merge_adapter",
            expected: format!("{:?}", w.dim()),
            got: format!("{:?}", delta.dim()),
        });
    }
    Ok(w + &delta)
}
