//! Token-sampling policy: significance scores, deterministic inverse
//! transform sampling, and the MSE-to-uniform attention attack loss.
//!
//! Sampling keeps tokens the class token attends to; a sharply peaked score
//! distribution therefore retains few tokens. The attack flattens the class
//! attention row so that the fixed quantiles hit as many distinct tokens as
//! possible.

use crate::autodiff::{Tape, Var};
use crate::config::AtsParams;
use crate::error::{Error, Result};
use crate::vit::{AtsGraph, ComputeTrace};
use ndarray::Array2;

/// Normalized per-token significance (non-class tokens only).
#[derive(Debug, Clone)]
pub struct SignificanceScores {
    pub scores: Vec<f64>,
    /// True when the normalizer degenerated and uniform scores were used.
    pub uniform_fallback: bool,
}

/// `S_j = a_j * ||V_j|| / sum_i a_i * ||V_i||` over non-class tokens.
pub fn significance_scores(attn: &[f64], value_norms: &[f64]) -> Result<SignificanceScores> {
    if attn.len() != value_norms.len() {
        return Err(Error::contract(
            "attention row and value norms must align",
        ));
    }
    if attn.is_empty() {
        return Err(Error::contract("no candidate tokens to score"));
    }
    if attn.iter().any(|a| *a < -1e-12) || value_norms.iter().any(|n| *n < 0.0) {
        return Err(Error::contract(
            "attention weights and value norms must be non-negative",
        ));
    }
    let weighted: Vec<f64> = attn
        .iter()
        .zip(value_norms.iter())
        .map(|(a, n)| a * n)
        .collect();
    let total: f64 = weighted.iter().sum();
    if total < 1e-12 {
        // class token attends only to itself: no signal, fall back to uniform
        let u = 1.0 / attn.len() as f64;
        return Ok(SignificanceScores {
            scores: vec![u; attn.len()],
            uniform_fallback: true,
        });
    }
    Ok(SignificanceScores {
        scores: weighted.into_iter().map(|w| w / total).collect(),
        uniform_fallback: false,
    })
}

/// Deterministic inverse transform sampling.
///
/// Builds the CDF over tokens in index order and evaluates it at the fixed
/// quantiles `(k - 0.5) / n_target`; each quantile maps to the first index
/// whose CDF reaches it. Returns sorted, deduplicated local indices.
pub fn inverse_transform_sample(scores: &[f64], n_target: usize) -> Vec<usize> {
    assert!(!scores.is_empty());
    assert!(n_target >= 1);
    let total: f64 = scores.iter().sum();
    let cdf: Vec<f64> = scores
        .iter()
        .scan(0.0, |acc, s| {
            *acc += if total > 0.0 { s / total } else { 1.0 / scores.len() as f64 };
            Some(*acc)
        })
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    for k in 1..=n_target {
        let q = (k as f64 - 0.5) / n_target as f64;
        let idx = cdf
            .iter()
            .position(|c| *c >= q)
            .unwrap_or(scores.len() - 1);
        if kept.last() != Some(&idx) {
            kept.push(idx);
        }
    }
    kept.dedup();
    kept
}

/// Per-head sum of `(A_{1,i} - 1/N)^2` over active non-class tokens,
/// summed across heads and weighted across the sampling layers.
pub fn ats_attack_loss(trace: &ComputeTrace, params: &AtsParams) -> Result<f64> {
    let mut total = 0.0;
    for (idx, layer1) in params.ats_layers.iter().enumerate() {
        let layer = trace
            .layers
            .get(layer1 - 1)
            .ok_or_else(|| Error::contract(format!("layer {layer1} missing from trace")))?;
        if layer.attention.is_empty() {
            return Err(Error::contract(format!(
                "no attention recorded for layer {layer1}"
            )));
        }
        let n = layer.n_active as f64;
        let target = 1.0 / n;
        let mut layer_loss = 0.0;
        for a in &layer.attention {
            for (j, active) in layer.active_in.iter().enumerate().skip(1) {
                if *active {
                    let d = a[(0, j)] - target;
                    layer_loss += d * d;
                }
            }
        }
        total += params.layer_loss_weights[idx] * layer_loss;
    }
    Ok(total)
}

/// Tape node of [`ats_attack_loss`], built from the class-row attention
/// nodes recorded during the forward pass.
pub fn ats_attack_loss_node(tape: &mut Tape, graph: &AtsGraph, params: &AtsParams) -> Result<Var> {
    if graph.layers.is_empty() {
        return Err(Error::contract("forward pass recorded no sampling layers"));
    }
    let mut acc: Option<Var> = None;
    for entry in &graph.layers {
        let idx = params
            .ats_layers
            .iter()
            .position(|l| *l == entry.layer)
            .ok_or_else(|| Error::contract(format!("layer {} missing from params", entry.layer)))?;
        let weight = params.layer_loss_weights[idx];
        let n = entry.n_active as f64;
        let t_len = entry.active.len();
        // select active non-class entries
        let selector = Array2::from_shape_fn((1, t_len), |(_, j)| {
            if j > 0 && entry.active[j] {
                1.0
            } else {
                0.0
            }
        });
        for row in &entry.class_rows {
            let shifted = tape.add_scalar(*row, -1.0 / n);
            let sq = tape.square(shifted);
            let masked = tape.mul_const_mat(sq, selector.clone());
            let sum = tape.sum_all(masked);
            let weighted = tape.scale(sum, weight);
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted),
                None => weighted,
            });
        }
    }
    Ok(acc.expect("at least one sampling layer"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_symmetric_case() {
        let s = significance_scores(&[0.3, 0.3], &[1.0, 1.0]).unwrap();
        assert_eq!(s.scores, vec![0.5, 0.5]);
        assert!(!s.uniform_fallback);
    }

    #[test]
    fn scores_weighted_case() {
        // a = (0.2, 0.6), ||V|| = (1.0, 0.5) -> products (0.2, 0.3) -> (0.4, 0.6)
        let s = significance_scores(&[0.2, 0.6], &[1.0, 0.5]).unwrap();
        assert!((s.scores[0] - 0.4).abs() < 1e-12);
        assert!((s.scores[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn scores_normalize_for_random_inputs() {
        let attn = [0.11, 0.07, 0.31, 0.02, 0.19];
        let norms = [0.5, 1.3, 0.2, 2.0, 0.9];
        let s = significance_scores(&attn, &norms).unwrap();
        let sum: f64 = s.scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(s.scores.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn scores_fall_back_to_uniform() {
        let s = significance_scores(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(s.uniform_fallback);
        assert_eq!(s.scores, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn scores_reject_mismatched_inputs() {
        assert!(significance_scores(&[0.5], &[1.0, 2.0]).is_err());
        assert!(significance_scores(&[], &[]).is_err());
    }

    #[test]
    fn sample_uniform_keeps_everything() {
        let n = 8;
        let scores = vec![1.0 / n as f64; n];
        let kept = inverse_transform_sample(&scores, n);
        assert_eq!(kept, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn sample_one_hot_keeps_single_token() {
        let mut scores = vec![0.0; 6];
        scores[3] = 1.0;
        let kept = inverse_transform_sample(&scores, 6);
        assert_eq!(kept, vec![3]);
    }

    #[test]
    fn sample_spec_quantile_walk() {
        // scores (0.5, 0.25, 0.25), 4 quantiles {0.125, 0.375, 0.625, 0.875}
        // -> indices {0, 0, 1, 2} -> kept {0, 1, 2}
        let kept = inverse_transform_sample(&[0.5, 0.25, 0.25], 4);
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn sample_is_deterministic_and_idempotent() {
        let scores = [0.4, 0.1, 0.3, 0.2];
        let a = inverse_transform_sample(&scores, 3);
        let b = inverse_transform_sample(&scores, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn sharper_distributions_never_keep_more() {
        // grid search over 4-token score vectors: mixing any distribution
        // toward uniform (flattening) cannot reduce the retained count
        let n_target = 4;
        let base = [0.7, 0.15, 0.1, 0.05];
        let uniform = [0.25; 4];
        let mut prev_len = 0;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let mixed: Vec<f64> = base
                .iter()
                .zip(uniform.iter())
                .map(|(b, u)| (1.0 - t) * b + t * u)
                .collect();
            let kept = inverse_transform_sample(&mixed, n_target).len();
            assert!(
                kept >= prev_len,
                "flattening reduced retained count at t={t}: {kept} < {prev_len}"
            );
            prev_len = kept;
        }
    }
}
