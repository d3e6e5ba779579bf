//! Decision-network gating policy: per-block keep-probabilities for patches,
//! heads and blocks, gumbel-sigmoid discretization, the usage loss, and its
//! negated attack objective (all keep-targets driven to zero and the sign
//! flipped, so minimizing the attack loss switches everything on).

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::vit::AdavitGraph;
use ndarray::Array2;
use rand::Rng;

/// Keep-masks of one forward pass; soft values in `[0,1]`, hard in `{0,1}`.
#[derive(Debug, Clone)]
pub struct KeepMasks {
    /// Per non-class token, per block: `[K, L]`.
    pub patch: Array2<f64>,
    /// Per head, per block: `[H, L]`.
    pub head: Array2<f64>,
    /// Per block: `[L]`.
    pub block: Vec<f64>,
    pub hard: bool,
}

impl KeepMasks {
    pub fn mean_patch(&self) -> f64 {
        mean(self.patch.iter())
    }

    pub fn mean_head(&self) -> f64 {
        mean(self.head.iter())
    }

    pub fn mean_block(&self) -> f64 {
        mean(self.block.iter())
    }
}

fn mean<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

/// Gate logits from a block input: per-token patch logits from every
/// non-class token, head and block logits from the class token.
pub fn decision_forward(
    block_input: &Array2<f64>,
    w_patch: &Array2<f64>,
    w_head: &Array2<f64>,
    w_block: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let d = block_input.ncols();
    if w_patch.dim() != (d, 1) || w_head.nrows() != d || w_block.dim() != (d, 1) {
        return Err(Error::contract("gate weight shapes do not match input dim"));
    }
    if block_input.nrows() < 2 {
        return Err(Error::contract("block input needs class + patch tokens"));
    }
    let z_cls = block_input.slice(ndarray::s![0..1, ..]).to_owned();
    let z_patch = block_input.slice(ndarray::s![1.., ..]).to_owned();
    Ok((z_patch.dot(w_patch), z_cls.dot(w_head), z_cls.dot(w_block)))
}

/// Gumbel-sigmoid mask over arbitrary logits. Soft mode returns
/// `sigmoid((m + g1 - g0) / temperature)`; hard mode thresholds at 0.5
/// (the straight-through gradient lives on the tape path, not here).
pub fn gumbel_mask(logits: &Array2<f64>, temperature: f64, hard: bool, seed: u64) -> Array2<f64> {
    assert!(temperature > 0.0);
    let mut rng = rng::substream(seed, "gumbel-mask", 0);
    let soft = logits.mapv(|m| {
        let g1 = gumbel(&mut rng);
        let g0 = gumbel(&mut rng);
        sigmoid((m + g1 - g0) / temperature)
    });
    if hard {
        soft.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 })
    } else {
        soft
    }
}

fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Squared deviation of the mean keep-rates from their targets.
pub fn usage_loss(masks: &KeepMasks, gammas: (f64, f64, f64)) -> f64 {
    let (gp, gh, gb) = gammas;
    (masks.mean_patch() - gp).powi(2)
        + (masks.mean_head() - gh).powi(2)
        + (masks.mean_block() - gb).powi(2)
}

/// Usage loss with zero targets, negated: `-(mp^2 + mh^2 + mb^2)`.
/// Global minimum `-3` at all-keep, global maximum `0` at all-drop.
pub fn adavit_attack_loss(masks: &KeepMasks) -> f64 {
    -usage_loss(masks, (0.0, 0.0, 0.0))
}

fn mask_means_node(tape: &mut Tape, graph: &AdavitGraph) -> Result<(Var, Var, Var)> {
    if graph.patch.is_empty() {
        return Err(Error::contract("no gate masks recorded"));
    }
    let patch = tape.concat_cols(&graph.patch); // [K, L]
    let head = tape.concat_rows(&graph.head); // [L, H]
    let block = tape.concat_rows(&graph.block); // [L, 1]
    Ok((
        tape.mean_all(patch),
        tape.mean_all(head),
        tape.mean_all(block),
    ))
}

/// Tape node of [`usage_loss`].
pub fn usage_loss_node(tape: &mut Tape, graph: &AdavitGraph, gammas: (f64, f64, f64)) -> Result<Var> {
    let (mp, mh, mb) = mask_means_node(tape, graph)?;
    let dp = tape.add_scalar(mp, -gammas.0);
    let dh = tape.add_scalar(mh, -gammas.1);
    let db = tape.add_scalar(mb, -gammas.2);
    let sp = tape.square(dp);
    let sh = tape.square(dh);
    let sb = tape.square(db);
    let s = tape.add(sp, sh);
    Ok(tape.add(s, sb))
}

/// Tape node of [`adavit_attack_loss`].
pub fn adavit_attack_loss_node(tape: &mut Tape, graph: &AdavitGraph) -> Result<Var> {
    let usage = usage_loss_node(tape, graph, (0.0, 0.0, 0.0))?;
    Ok(tape.scale(usage, -1.0))
}
