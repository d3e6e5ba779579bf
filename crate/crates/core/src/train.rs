//! Desk-scale backbone training with the policy-appropriate loss
//! (cross-entropy plus the efficiency terms each policy trains with).

use crate::config::{PolicyKind, PolicyParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops;
use crate::optim::AdamW;
use crate::parallel::{map_reduce_ordered, ordered_map, DEFAULT_CHUNK};
use crate::patch::{cross_entropy_node, Patch};
use crate::policy::{adavit, avit};
use crate::rng::{self, child_seed};
use crate::vit::{ForwardOptions, ForwardPass, PolicyGraph, VitModel};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Evaluate on the eval split every N epochs (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            seed,
            parallel: true,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub eval_mean_flops: Option<f64>,
}

/// Training loss for one forward pass: cross-entropy plus the policy's own
/// efficiency terms.
pub fn training_loss_node(
    fp: &mut ForwardPass,
    model: &VitModel,
    label: usize,
) -> Result<crate::autodiff::Var> {
    let logits = fp.logits;
    let ce = cross_entropy_node(&mut fp.tape, logits, label);
    let ForwardPass {
        tape,
        policy_graph,
        trace,
        ..
    } = fp;
    match (&model.config().policy_params, &*policy_graph) {
        (PolicyParams::Avit(p), PolicyGraph::Avit(g)) => {
            let halt = &trace
                .halting
                .as_ref()
                .ok_or_else(|| Error::contract("missing halting record"))?
                .halt_layer;
            let distr = avit::distribution_loss_node(tape, g, p)?;
            let ponder = avit::ponder_loss_node(tape, g, halt)?;
            let wd = tape.scale(distr, p.alpha_d);
            let wp = tape.scale(ponder, p.alpha_p);
            let eff = tape.add(wd, wp);
            Ok(tape.add(ce, eff))
        }
        (PolicyParams::Adavit(p), PolicyGraph::Adavit(g)) => {
            let usage = adavit::usage_loss_node(tape, g, p.gammas)?;
            Ok(tape.add(ce, usage))
        }
        _ => Ok(ce),
    }
}

/// Loss, correct-count and parameter gradients of one minibatch, reduced in
/// a fixed order. `patch`, when given, is pasted on every image first.
pub fn batch_param_gradients(
    model: &VitModel,
    dataset: &Dataset,
    batch: &[usize],
    patch: Option<&Patch>,
    seed: u64,
    step: usize,
    parallel: bool,
) -> Result<(f64, usize, Vec<Array2<f64>>)> {
    let zero_grads = || -> Vec<Array2<f64>> {
        (0..model.param_count())
            .map(|i| Array2::zeros(model.param(i).raw_dim()))
            .collect()
    };
    let per_image = |pos: usize| -> Result<(f64, bool, Vec<Array2<f64>>)> {
        let idx = batch[pos];
        let pixels = dataset.pixels(idx);
        let gumbel = child_seed(seed, "train-gumbel", (step * batch.len() + pos) as u64);
        let mut fp = model.forward(&pixels, patch, &ForwardOptions::training(gumbel))?;
        let loss = training_loss_node(&mut fp, model, dataset.label(idx))?;
        let value = fp.tape.scalar(loss);
        let grads = fp.tape.backward(loss);
        let mut acc = zero_grads();
        fp.accumulate_param_gradients(&grads, &mut acc);
        let correct = fp.trace.predicted_class() == dataset.label(idx);
        Ok((value, correct, acc))
    };

    map_reduce_ordered(
        batch.len(),
        DEFAULT_CHUNK,
        parallel,
        |range| -> Result<(f64, usize, Vec<Array2<f64>>)> {
            let mut loss = 0.0;
            let mut correct = 0usize;
            let mut grads = zero_grads();
            for pos in range {
                let (l, c, g) = per_image(pos)?;
                loss += l;
                correct += usize::from(c);
                for (a, b) in grads.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            Ok((loss, correct, grads))
        },
        |acc: Result<(f64, usize, Vec<Array2<f64>>)>, part| {
            let (mut loss, mut correct, mut grads) = acc?;
            let (l, c, g) = part?;
            loss += l;
            correct += c;
            for (a, b) in grads.iter_mut().zip(g.iter()) {
                *a += b;
            }
            Ok((loss, correct, grads))
        },
        Ok((0.0, 0, zero_grads())),
    )
}

/// Hard-mode accuracy and mean FLOPs over (a subset of) a dataset.
pub fn evaluate_model(
    model: &VitModel,
    dataset: &Dataset,
    limit: usize,
    seed: u64,
    parallel: bool,
) -> Result<(f64, f64)> {
    let n = dataset.len().min(limit.max(1));
    let results = ordered_map(n, parallel, |idx| -> Result<(bool, u64)> {
        let pixels = dataset.pixels(idx);
        let fp = model.forward(
            &pixels,
            None,
            &ForwardOptions::evaluation(child_seed(seed, "eval-gumbel", idx as u64)),
        )?;
        let fl = flops::trace_flops(&fp.trace, model.config())?;
        Ok((fp.trace.predicted_class() == dataset.label(idx), fl.total))
    });
    let mut correct = 0usize;
    let mut flops_sum = 0f64;
    for r in results {
        let (c, f) = r?;
        correct += usize::from(c);
        flops_sum += f as f64;
    }
    Ok((correct as f64 / n as f64, flops_sum / n as f64))
}

/// Train the backbone in place. The sampling policy trains its backbone with
/// static compute (sampling is attached only at evaluation time), everything
/// else trains with its own efficiency loss.
pub fn train_backbone(
    model: &mut VitModel,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    train_with_patches(model, train, eval, cfg, None)
}

/// Shared loop used by plain training and adversarial training. When
/// `patch_for_step` is given, its result is pasted on the whole minibatch.
pub(crate) fn train_with_patches(
    model: &mut VitModel,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    mut patch_for_step: Option<&mut dyn FnMut(usize, usize, &VitModel) -> Result<Option<Patch>>>,
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::contract("empty train dataset"));
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, model.param_count());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // last-good snapshot for divergence recovery
        let snapshot: Vec<Array2<f64>> =
            (0..model.param_count()).map(|i| model.param(i).clone()).collect();

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = rng::substream(cfg.seed, "train-epoch", epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for step in 0..steps_per_epoch {
            let global_step = epoch * steps_per_epoch + step;
            let lo = step * cfg.batch_size;
            let hi = ((step + 1) * cfg.batch_size).min(train.len());
            let batch: Vec<usize> = order[lo..hi].to_vec();

            let patch = match patch_for_step.as_mut() {
                Some(f) => f(epoch, step, model)?,
                None => None,
            };
            // training policy: the sampling policy trains on the static backbone
            let (l, c, grads) = if model.config().policy() == PolicyKind::Ats {
                let twin = model.with_policy_params(PolicyParams::None)?;
                batch_param_gradients(
                    &twin,
                    train,
                    &batch,
                    patch.as_ref(),
                    cfg.seed,
                    global_step,
                    cfg.parallel,
                )?
            } else {
                batch_param_gradients(
                    model,
                    train,
                    &batch,
                    patch.as_ref(),
                    cfg.seed,
                    global_step,
                    cfg.parallel,
                )?
            };
            let n = batch.len() as f64;
            let mean_loss = l / n;
            if !mean_loss.is_finite() {
                // divergence: restore the last-good snapshot before bailing
                for (i, s) in snapshot.into_iter().enumerate() {
                    *model.param_mut(i) = s;
                }
                return Err(Error::NonFinite {
                    iteration: global_step,
                    value: mean_loss,
                });
            }
            loss_sum += mean_loss;
            correct += c;
            seen += batch.len();

            opt.begin_step();
            for (i, g) in grads.iter().enumerate() {
                let mean_grad = g.mapv(|v| v / n);
                opt.update(i, model.param_mut(i), &mean_grad);
            }
        }

        let do_eval = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let (eval_acc, eval_mean_flops) = if do_eval {
            let (a, f) = evaluate_model(model, eval, eval.len(), cfg.seed, cfg.parallel)?;
            (Some(a), Some(f))
        } else {
            (None, None)
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            train_acc: correct as f64 / seen as f64,
            eval_acc,
            eval_mean_flops,
        });
    }
    Ok(metrics)
}
