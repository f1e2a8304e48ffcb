//! Scaled dot-product attention for a single head, exposed standalone
//! so the formula can be tested against hand evaluation.

use super::net::HeadWeights;
use super::ModelError;
use ndarray::{Array1, Array2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Decoder style: position t attends to positions 0..=t.
    Causal,
    /// Encoder style: every position attends everywhere.
    Bidirectional,
}

pub(super) fn softmax_rows_masked(scores: &Array2<f64>, mode: AttnMode) -> Array2<f64> {
    let t = scores.nrows();
    let mut probs = Array2::zeros((t, t));
    for i in 0..t {
        let visible = match mode {
            AttnMode::Causal => i + 1,
            AttnMode::Bidirectional => t,
        };
        let row = scores.row(i);
        let max = row
            .iter()
            .take(visible)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            probs[[i, j]] = e;
            denom += e;
        }
        for j in 0..visible {
            probs[[i, j]] /= denom;
        }
    }
    probs
}

pub(super) fn softmax_vec(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|z| (z - max).exp());
    let denom = exps.sum();
    exps / denom
}

/// softmax(Q Kᵀ / √k) V for one head, where Q = X·W_Q etc. and W
/// matrices may already carry merged adapter updates. Returns the T×k
/// head output.
pub fn attention_forward(
    x: &Array2<f64>,
    weights: &HeadWeights,
    mode: AttnMode,
) -> Result<Array2<f64>, ModelError> {
    attention_forward_probs(x, weights, mode).map(|(out, _)| out)
}

/// As [`attention_forward`], also returning the row-stochastic T×T
/// attention matrix.
pub fn attention_forward_probs(
    x: &Array2<f64>,
    weights: &HeadWeights,
    mode: AttnMode,
) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
    let d = weights.w_q.nrows();
    let k = weights.w_q.ncols();
    if x.ncols() != d {
        return Err(ModelError::ShapeMismatch {
            op: "attention_forward",
            expected: format!("X with {d} columns"),
            got: format!("{:?}", x.dim()),
        });
    }
    for (name, w) in [("W_Q", &weights.w_q), ("W_K", &weights.w_k), ("W_V", &weights.w_v)] {
        if w.dim() != (d, k) {
            return Err(ModelError::ShapeMismatch {
                op: "attention_forward",
                expected: format!("({d}, {k})"),
                got: format!("{name} {:?}", w.dim()),
            });
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput("attention input"));
    }

    let q = x.dot(&weights.w_q);
    let key = x.dot(&weights.w_k);
    let v = x.dot(&weights.w_v);
    let scores = q.dot(&key.t()) / (k as f64).sqrt();
    let probs = softmax_rows_masked(&scores, mode);
    Ok((probs.dot(&v), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_head(d: usize, k: usize) -> HeadWeights {
        let mut w = Array2::zeros((d, k));
        for i in 0..d.min(k) {
            w[[i, i]] = 1.0;
        }
        HeadWeights {
            w_q: w.clone(),
            w_k: w.clone(),
            w_v: w,
        }
    }

    #[test]
    fn single_position_returns_value_row() {
        let x = array![[0.3, -1.2, 0.7]];
        let weights = identity_head(3, 3);
        let out = attention_forward(&x, &weights, AttnMode::Bidirectional).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_stochastic_for_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-2.0..2.0));
        let w = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let weights = HeadWeights {
            w_q: w.clone(),
            w_k: w.clone(),
            w_v: w,
        };
        for mode in [AttnMode::Causal, AttnMode::Bidirectional] {
            let (_, probs) = attention_forward_probs(&x, &weights, mode).unwrap();
            for row in probs.rows() {
                let sum: f64 = row.sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn causal_mask_zeroes_the_future() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let weights = identity_head(2, 2);
        let (_, probs) = attention_forward_probs(&x, &weights, AttnMode::Causal).unwrap();
        assert_eq!(probs[[0, 1]], 0.0);
        assert_eq!(probs[[0, 2]], 0.0);
        assert_eq!(probs[[1, 2]], 0.0);
        assert!(probs[[2, 0]] > 0.0);
    }

    #[test]
    fn two_by_two_hand_case_matches_formula() {
        // k = 1, identity projections: X = [[1], [2]] gives scores
        // s_ij = x_i * x_j (already divided by sqrt(1) = 1). Row 0:
        // softmax([1, 2]) = [e/(e+e^2), e^2/(e+e^2)]; output row 0 is
        // that mixed with values [1, 2].
        let x = array![[1.0], [2.0]];
        let weights = identity_head(1, 1);
        let (out, probs) = attention_forward_probs(&x, &weights, AttnMode::Bidirectional).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        let p01 = e2 / (e1 + e2);
        let expected0 = (1.0 - p01) * 1.0 + p01 * 2.0;
        let e4 = 4f64.exp();
        let p11 = e4 / (e2 + e4);
        let expected1 = (1.0 - p11) * 1.0 + p11 * 2.0;
        assert!((probs[[0, 1]] - p01).abs() < 1e-12);
        assert!((out[[0, 0]] - expected0).abs() < 1e-12);
        assert!((out[[1, 0]] - expected1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let x = array![[f64::NAN, 0.0]];
        let weights = identity_head(2, 2);
        assert!(matches!(
            attention_forward(&x, &weights, AttnMode::Bidirectional),
            Err(ModelError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = array![[1.0, 2.0, 3.0]];
        let weights = identity_head(2, 2);
        assert!(matches!(
            attention_forward(&x, &weights, AttnMode::Bidirectional),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }
}
