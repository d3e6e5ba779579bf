//! Token-halting policy: cumulative halting with threshold `1 - epsilon`,
//! ponder loss, Gaussian-prior distribution loss, and the negated attack
//! objective that drives tokens to stay alive as long as possible.

use crate::autodiff::{sigmoid, Tape, Var};
use crate::config::HaltingParams;
use crate::error::{Error, Result};
use crate::vit::AvitGraph;
use ndarray::Array2;

/// Numerical floor for the normalizer of the expected-halting distribution.
const DISTR_FLOOR: f64 = 1e-8;
/// Tiny shift inside logs so empty layers do not produce infinities.
const LOG_TAU: f64 = 1e-12;

/// Per-token halting outcome of one forward pass.
#[derive(Debug, Clone)]
pub struct HaltingRecord {
    /// Halting scores `[K, L]`, zeroed after a token's halting layer.
    pub scores: Array2<f64>,
    /// 1-indexed layer each token halted at (`num_layers` if it never did).
    pub halt_layer: Vec<usize>,
    /// `1 - sum of scores before the halting layer`, per token.
    pub remainder: Vec<f64>,
}

impl HaltingRecord {
    pub fn num_tokens(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.scores.ncols()
    }
}

/// Halting score of each token from embedding dimension 0.
pub fn halting_score(dim0: &[f64], params: &HaltingParams) -> Vec<f64> {
    dim0.iter()
        .map(|t0| sigmoid(params.gate_gain * t0 + params.gate_bias))
        .collect()
}

/// Recompute halting layers and remainders from a per-layer score matrix.
///
/// `scores[k, l]` is token `k`'s score at layer `l+1` while it was still
/// alive (entries after the halting layer are ignored). This is the batch
/// counterpart of the incremental bookkeeping done during the forward pass;
/// the two must agree, which the pipeline tests assert.
pub fn apply_halting(scores: &Array2<f64>, epsilon: f64) -> HaltingRecord {
    let (k, l) = scores.dim();
    let threshold = 1.0 - epsilon;
    let mut out = scores.clone();
    let mut halt_layer = vec![l; k];
    let mut remainder = vec![0.0; k];
    for i in 0..k {
        let mut cum = 0.0;
        let mut halted = false;
        for j in 0..l {
            if halted {
                out[(i, j)] = 0.0;
                continue;
            }
            cum += scores[(i, j)];
            if cum >= threshold {
                halt_layer[i] = j + 1;
                halted = true;
            }
        }
        remainder[i] = 1.0
            - (0..halt_layer[i].saturating_sub(1))
                .map(|j| out[(i, j)])
                .sum::<f64>();
    }
    HaltingRecord {
        scores: out,
        halt_layer,
        remainder,
    }
}

/// Mean over tokens of `halting layer + remainder`.
pub fn ponder_loss(record: &HaltingRecord) -> Result<f64> {
    let k = record.num_tokens();
    if k == 0 {
        return Err(Error::domain("ponder loss over zero tokens"));
    }
    let sum: f64 = record
        .halt_layer
        .iter()
        .zip(record.remainder.iter())
        .map(|(n, r)| *n as f64 + r)
        .sum();
    Ok(sum / k as f64)
}

/// Discretized Gaussian over layers `1..=num_layers`.
pub fn gaussian_prior(num_layers: usize, target_layer: f64, prior_std: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=num_layers)
        .map(|l| {
            let z = (l as f64 - target_layer) / prior_std;
            (-0.5 * z * z).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// `KL(p || q)` with a tiny shift inside the logs; exactly zero when `p == q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(pi, qi)| pi * ((pi + LOG_TAU).ln() - (qi + LOG_TAU).ln()))
        .sum()
}

/// KL between the token-averaged halting-score profile (normalized) and the
/// Gaussian prior over layers.
pub fn distribution_loss(record: &HaltingRecord, params: &HaltingParams) -> f64 {
    let (k, l) = record.scores.dim();
    let mut p: Vec<f64> = (0..l)
        .map(|j| (0..k).map(|i| record.scores[(i, j)]).sum::<f64>() / k as f64)
        .collect();
    let mut norm: f64 = p.iter().sum();
    if norm < DISTR_FLOOR {
        norm = DISTR_FLOOR;
    }
    for v in p.iter_mut() {
        *v /= norm;
    }
    let q = gaussian_prior(l, params.target_layer, params.prior_std);
    kl_divergence(&p, &q)
}

/// `-(alpha_d * distribution + alpha_p * ponder)`: minimizing it keeps
/// tokens alive and pushes the halting profile away from its prior.
pub fn avit_attack_loss(record: &HaltingRecord, params: &HaltingParams) -> Result<f64> {
    Ok(-(params.alpha_d * distribution_loss(record, params)
        + params.alpha_p * ponder_loss(record)?))
}

/// Selector `[K, L]` with 1 where layer `l+1 < halt_layer[k]` — the score
/// positions that feed the remainder.
fn remainder_selector(halt_layer: &[usize], num_layers: usize) -> Array2<f64> {
    Array2::from_shape_fn((halt_layer.len(), num_layers), |(k, l)| {
        if l + 1 < halt_layer[k] {
            1.0
        } else {
            0.0
        }
    })
}

/// Tape node for the ponder loss. Gradients flow through the remainder only;
/// halting layers are constants of the forward pass.
pub fn ponder_loss_node(tape: &mut Tape, graph: &AvitGraph, halt_layer: &[usize]) -> Result<Var> {
    let k = halt_layer.len();
    if k == 0 {
        return Err(Error::domain("ponder loss over zero tokens"));
    }
    let num_layers = graph.h_layers.len();
    let h = tape.concat_cols(&graph.h_layers); // [K, L]
    let sel = remainder_selector(halt_layer, num_layers);
    let masked = tape.mul_const_mat(h, sel);
    let pre = tape.sum_cols(masked); // [K,1] cumulative score before halting
    let neg = tape.scale(pre, -1.0);
    let r = tape.add_scalar(neg, 1.0);
    let mean_r = tape.mean_all(r);
    let mean_n = halt_layer.iter().map(|n| *n as f64).sum::<f64>() / k as f64;
    Ok(tape.add_scalar(mean_r, mean_n))
}

/// Tape node for the distribution loss.
pub fn distribution_loss_node(
    tape: &mut Tape,
    graph: &AvitGraph,
    params: &HaltingParams,
) -> Result<Var> {
    let num_layers = graph.h_layers.len();
    if num_layers == 0 {
        return Err(Error::contract("no halting scores recorded"));
    }
    let k = tape.value(graph.h_layers[0]).nrows();
    let h = tape.concat_cols(&graph.h_layers); // [K, L]
    let p = tape.sum_rows(h); // [1, L]
    let p = tape.scale(p, 1.0 / k as f64);
    let norm = tape.sum_all(p);
    let pt = if tape.scalar(norm) < DISTR_FLOOR {
        // degenerate profile: fall back to a constant normalizer (the
        // gradient through the floor is zero by construction)
        tape.scale(p, 1.0 / DISTR_FLOOR)
    } else {
        tape.div_scalar_var(p, norm)
    };
    let q = gaussian_prior(num_layers, params.target_layer, params.prior_std);
    let shifted = tape.add_scalar(pt, LOG_TAU);
    let ln_p = tape.ln(shifted);
    let ln_q = Array2::from_shape_fn((1, num_layers), |(_, j)| -((q[j] + LOG_TAU).ln()));
    let diff = tape.add_const_mat(ln_p, ln_q);
    let prod = tape.mul(pt, diff);
    Ok(tape.sum_all(prod))
}

/// Tape node for the attack objective.
pub fn avit_attack_loss_node(
    tape: &mut Tape,
    graph: &AvitGraph,
    params: &HaltingParams,
    halt_layer: &[usize],
) -> Result<Var> {
    let distr = distribution_loss_node(tape, graph, params)?;
    let ponder = ponder_loss_node(tape, graph, halt_layer)?;
    let wd = tape.scale(distr, params.alpha_d);
    let wp = tape.scale(ponder, params.alpha_p);
    let sum = tape.add(wd, wp);
    Ok(tape.scale(sum, -1.0))
}
