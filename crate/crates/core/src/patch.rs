//! Universal adversarial patch lifecycle: init, paste, objective losses,
//! optimization against a frozen model, projection/quantization, and
//! evaluation into an [`AttackReport`].
//!
//! A patch is the attack's only free parameter: one pixel block at a fixed
//! location, trained on the train split and pasted unchanged on every eval
//! image.

use crate::autodiff::{self, Tape, Var};
use crate::config::{ModelConfig, PolicyParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops;
use crate::optim::AdamW;
use crate::parallel::{map_reduce_ordered, ordered_map, DEFAULT_CHUNK};
use crate::policy::{adavit, ats, avit};
use crate::report::AttackReport;
use crate::rng::{self, child_seed};
use crate::vit::{ForwardOptions, ForwardPass, PolicyGraph, VitModel};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Learnable pixel block with a fixed location.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `[P*P, 3]` pixel values in [0,255], quantized to integer levels.
    pub pixels: Array2<f64>,
    /// (row, col) of the top-left corner in image coordinates.
    pub location: (usize, usize),
    pub size: usize,
}

impl Patch {
    /// IID uniform integer pixels; deterministic per seed.
    pub fn init(size: usize, location: (usize, usize), image_size: usize, seed: u64) -> Result<Patch> {
        check_bounds(size, location, image_size)?;
        let mut rng = rng::substream(seed, "patch-init", 0);
        let pixels = Array2::from_shape_fn((size * size, 3), |_| f64::from(rng.gen_range(0..=255u8)));
        Ok(Patch {
            pixels,
            location,
            size,
        })
    }

    /// Replace the patch region of `pixels` (an `[H*W, 3]` matrix).
    pub fn paste_into(&self, pixels: &mut Array2<f64>, image_size: usize) -> Result<()> {
        check_bounds(self.size, self.location, image_size)?;
        if pixels.dim() != (image_size * image_size, 3) {
            return Err(Error::config("pixel matrix does not match image size"));
        }
        let (r0, c0) = self.location;
        for i in 0..self.size {
            for j in 0..self.size {
                let flat = (r0 + i) * image_size + (c0 + j);
                for c in 0..3 {
                    pixels[(flat, c)] = self.pixels[(i * self.size + j, c)];
                }
            }
        }
        Ok(())
    }

    /// `paste_into` on a copy.
    pub fn apply(&self, pixels: &Array2<f64>, image_size: usize) -> Result<Array2<f64>> {
        let mut out = pixels.clone();
        self.paste_into(&mut out, image_size)?;
        Ok(out)
    }

    /// Clip to [0,255] and round to the 256 integer levels; idempotent.
    pub fn project_quantize(&mut self) {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 255.0).round());
    }

    /// Flat pixel indices of the patch region in an `image_size` image.
    pub fn region_indices(&self, image_size: usize) -> Vec<usize> {
        let (r0, c0) = self.location;
        let mut idx = Vec::with_capacity(self.size * self.size);
        for i in 0..self.size {
            for j in 0..self.size {
                idx.push((r0 + i) * image_size + (c0 + j));
            }
        }
        idx
    }

    /// Fraction of image area the patch covers.
    pub fn area_fraction(&self, image_size: usize) -> f64 {
        (self.size * self.size) as f64 / (image_size * image_size) as f64
    }

    /// Lossless 8-bit RGB image of the patch.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            let p = y as usize * self.size + x as usize;
            image::Rgb([
                self.pixels[(p, 0)] as u8,
                self.pixels[(p, 1)] as u8,
                self.pixels[(p, 2)] as u8,
            ])
        })
    }
}

fn check_bounds(size: usize, location: (usize, usize), image_size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if location.0 + size > image_size || location.1 + size > image_size {
        return Err(Error::config(format!(
            "patch {size}x{size} at {location:?} exceeds {image_size}x{image_size} image"
        )));
    }
    Ok(())
}

/// What the patch optimizes for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Maximize compute, task performance unconstrained.
    ComputeOnly,
    /// Maximize compute while keeping classification intact.
    PreserveAcc,
    /// Maximize compute while destroying classification.
    DestroyAcc,
    /// Targeted accuracy attack toward one class (baseline).
    Tap { target_class: usize },
    /// Non-targeted accuracy attack (baseline).
    Ntap,
    /// Untrained random patch (baseline); never optimized.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackObjective {
    pub kind: ObjectiveKind,
    pub task_weight: f64,
}

impl AttackObjective {
    pub fn compute_only() -> Self {
        AttackObjective {
            kind: ObjectiveKind::ComputeOnly,
            task_weight: 0.0,
        }
    }

    pub fn preserve_acc(task_weight: f64) -> Self {
        AttackObjective {
            kind: ObjectiveKind::PreserveAcc,
            task_weight,
        }
    }

    pub fn destroy_acc(task_weight: f64) -> Self {
        AttackObjective {
            kind: ObjectiveKind::DestroyAcc,
            task_weight,
        }
    }

    pub fn tap(target_class: usize) -> Self {
        AttackObjective {
            kind: ObjectiveKind::Tap { target_class },
            task_weight: 0.0,
        }
    }

    pub fn ntap() -> Self {
        AttackObjective {
            kind: ObjectiveKind::Ntap,
            task_weight: 0.0,
        }
    }

    pub fn random() -> Self {
        AttackObjective {
            kind: ObjectiveKind::Random,
            task_weight: 0.0,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            ObjectiveKind::ComputeOnly => "compute_only".into(),
            ObjectiveKind::PreserveAcc => "preserve_acc".into(),
            ObjectiveKind::DestroyAcc => "destroy_acc".into(),
            ObjectiveKind::Tap { target_class } => format!("tap_{target_class}"),
            ObjectiveKind::Ntap => "ntap".into(),
            ObjectiveKind::Random => "random".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_weight < 0.0 {
            return Err(Error::config("task_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Stable cross-entropy node: `-log softmax(logits)[class]`.
pub fn cross_entropy_node(tape: &mut Tape, logits: Var, class: usize) -> Var {
    let (rows, cols) = tape.value(logits).dim();
    assert_eq!(rows, 1);
    assert!(class < cols);
    let max = tape
        .value(logits)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -max);
    let e = tape.exp(shifted);
    let s = tape.sum_all(e);
    let lse = tape.ln(s);
    let onehot = Array2::from_shape_fn((1, cols), |(_, j)| if j == class { 1.0 } else { 0.0 });
    let picked_mat = tape.mul_const_mat(shifted, onehot);
    let picked = tape.sum_all(picked_mat);
    tape.sub(lse, picked)
}

/// The policy's compute-attack loss for this forward pass.
pub fn policy_attack_loss_node(fp: &mut ForwardPass, config: &ModelConfig) -> Result<Var> {
    let ForwardPass {
        tape,
        policy_graph,
        trace,
        ..
    } = fp;
    match (policy_graph, &config.policy_params) {
        (PolicyGraph::Avit(g), PolicyParams::Avit(p)) => {
            let halt = &trace
                .halting
                .as_ref()
                .ok_or_else(|| Error::contract("missing halting record"))?
                .halt_layer;
            avit::avit_attack_loss_node(tape, g, p, halt)
        }
        (PolicyGraph::Ats(g), PolicyParams::Ats(p)) => ats::ats_attack_loss_node(tape, g, p),
        (PolicyGraph::Adavit(g), PolicyParams::Adavit(_)) => {
            adavit::adavit_attack_loss_node(tape, g)
        }
        (PolicyGraph::None, _) => Err(Error::contract(
            "static-compute model has no adaptive policy to attack",
        )),
        _ => Err(Error::contract("policy graph does not match config")),
    }
}

/// Full objective for one forward pass.
pub fn objective_loss_node(
    fp: &mut ForwardPass,
    config: &ModelConfig,
    objective: &AttackObjective,
    label: Option<usize>,
) -> Result<Var> {
    objective.validate()?;
    match objective.kind {
        ObjectiveKind::ComputeOnly => policy_attack_loss_node(fp, config),
        ObjectiveKind::PreserveAcc | ObjectiveKind::DestroyAcc => {
            let policy = policy_attack_loss_node(fp, config)?;
            if objective.task_weight == 0.0 {
                return Ok(policy);
            }
            let y = label.ok_or_else(|| {
                Error::contract("accuracy-controlled objectives need ground-truth labels")
            })?;
            let logits = fp.logits;
            let ce = cross_entropy_node(&mut fp.tape, logits, y);
            let sign = if objective.kind == ObjectiveKind::PreserveAcc {
                objective.task_weight
            } else {
                -objective.task_weight
            };
            let weighted = fp.tape.scale(ce, sign);
            Ok(fp.tape.add(policy, weighted))
        }
        ObjectiveKind::Tap { target_class } => {
            if target_class >= config.num_classes {
                return Err(Error::contract("tap target class out of range"));
            }
            let logits = fp.logits;
            Ok(cross_entropy_node(&mut fp.tape, logits, target_class))
        }
        ObjectiveKind::Ntap => {
            let y = label.ok_or_else(|| Error::contract("ntap needs ground-truth labels"))?;
            let logits = fp.logits;
            let ce = cross_entropy_node(&mut fp.tape, logits, y);
            Ok(fp.tape.scale(ce, -1.0))
        }
        ObjectiveKind::Random => Err(Error::contract("random patches are not optimized")),
    }
}

/// Optimizer settings for patch training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchTrainConfig {
    /// AdamW learning rate in pixel units.
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub iterations: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

impl PatchTrainConfig {
    pub fn desk_scale(seed: u64) -> Self {
        PatchTrainConfig {
            lr: 0.4,
            weight_decay: 0.0,
            batch_size: 32,
            iterations: 300,
            seed,
            parallel: true,
        }
    }
}

/// Train a universal patch against a frozen model.
///
/// Per step: paste the current (quantized) patch on a minibatch, average the
/// pixel gradients over the batch, take an AdamW step on a continuous master
/// copy, then project to [0,255] and re-quantize the stored pixels. The
/// quantizer sits outside the gradient path.
pub fn train_patch(
    model: &VitModel,
    dataset: &Dataset,
    objective: &AttackObjective,
    init: Patch,
    cfg: &PatchTrainConfig,
) -> Result<(Patch, Vec<f64>)> {
    objective.validate()?;
    if objective.kind == ObjectiveKind::Random {
        return Ok((init, Vec::new()));
    }
    if dataset.is_empty() {
        return Err(Error::contract("empty train dataset"));
    }
    let image_size = model.config().image_size;
    check_bounds(init.size, init.location, image_size)?;

    let mut patch = init;
    patch.project_quantize();
    let mut master = patch.pixels.clone();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, 1);
    let mut history = Vec::with_capacity(cfg.iterations);
    let region = patch.region_indices(image_size);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = dataset.len(); // trigger shuffle at first step
    let mut epoch = 0u64;

    for step in 0..cfg.iterations {
        // epoch-style minibatches without replacement
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                let mut rng = rng::substream(cfg.seed, "patch-epoch", epoch);
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let (loss_sum, grad_sum) = batch_patch_gradient(
            model, dataset, &patch, objective, &batch, cfg.seed, step, cfg.parallel, &region,
        )?;
        let n = batch.len() as f64;
        let mean_loss = loss_sum / n;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: step,
                value: mean_loss,
            });
        }
        let grad = grad_sum.mapv(|g| g / n);

        opt.begin_step();
        opt.update(0, &mut master, &grad);
        master.mapv_inplace(|v| v.clamp(0.0, 255.0));
        patch.pixels = master.mapv(f64::round);
        history.push(mean_loss);
    }
    Ok((patch, history))
}

/// Mean-reducible batch gradient of the objective w.r.t. the patch pixels.
#[allow(clippy::too_many_arguments)]
fn batch_patch_gradient(
    model: &VitModel,
    dataset: &Dataset,
    patch: &Patch,
    objective: &AttackObjective,
    batch: &[usize],
    seed: u64,
    step: usize,
    parallel: bool,
    region: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let p2 = patch.size * patch.size;
    let per_image = |pos: usize| -> Result<(f64, Array2<f64>)> {
        let idx = batch[pos];
        let pixels = dataset.pixels(idx);
        let gumbel = child_seed(seed, "gumbel-train", (step * batch.len() + pos) as u64);
        let mut fp = model.forward(&pixels, Some(patch), &ForwardOptions::training(gumbel))?;
        let loss = objective_loss_node(&mut fp, model.config(), objective, Some(dataset.label(idx)))?;
        let value = fp.tape.scalar(loss);
        let grads = fp.tape.backward(loss);
        let pixel_grad = fp.pixel_gradient(&grads);
        let mut patch_grad = Array2::zeros((p2, 3));
        for (k, flat) in region.iter().enumerate() {
            for c in 0..3 {
                patch_grad[(k, c)] = pixel_grad[(*flat, c)];
            }
        }
        Ok((value, patch_grad))
    };

    map_reduce_ordered(
        batch.len(),
        DEFAULT_CHUNK,
        parallel,
        |range| -> Result<(f64, Array2<f64>)> {
            let mut loss = 0.0;
            let mut grad = Array2::zeros((p2, 3));
            for pos in range {
                let (l, g) = per_image(pos)?;
                loss += l;
                grad += &g;
            }
            Ok((loss, grad))
        },
        |acc: Result<(f64, Array2<f64>)>, part| {
            let (mut loss, mut grad) = acc?;
            let (l, g) = part?;
            loss += l;
            grad += &g;
            Ok((loss, grad))
        },
        Ok((0.0, Array2::zeros((p2, 3)))),
    )
}

/// Evaluation settings.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub seed: u64,
    pub parallel: bool,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        EvalOptions {
            seed,
            parallel: true,
        }
    }
}

/// Paste `patch` (if any) on every eval image, run hard-mode forwards, and
/// aggregate FLOPs and accuracy into a report. No gradients are computed.
pub fn evaluate_attack(
    model: &VitModel,
    patch: Option<&Patch>,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<AttackReport> {
    if dataset.is_empty() {
        return Err(Error::contract("empty eval dataset"));
    }
    let backward_before = autodiff::backward_call_count();
    let flops_max = flops::architectural_max_flops(model.config()) as f64;

    let run = |p: Option<&Patch>| -> Result<(Vec<u64>, f64)> {
        let results = ordered_map(dataset.len(), opts.parallel, |idx| -> Result<(u64, bool)> {
            let pixels = dataset.pixels(idx);
            let gumbel = child_seed(opts.seed, "eval-gumbel", idx as u64);
            let fp = model.forward(&pixels, p, &ForwardOptions::evaluation(gumbel))?;
            let fl = flops::trace_flops(&fp.trace, model.config())?;
            let correct = fp.trace.predicted_class() == dataset.label(idx);
            Ok((fl.total, correct))
        });
        let mut flops_per_image = Vec::with_capacity(dataset.len());
        let mut correct = 0usize;
        for r in results {
            let (f, c) = r?;
            flops_per_image.push(f);
            if c {
                correct += 1;
            }
        }
        let acc = correct as f64 / dataset.len() as f64;
        Ok((flops_per_image, acc))
    };

    let (base_flops, base_acc) = run(None)?;
    let (att_flops, att_acc) = match patch {
        Some(p) => run(Some(p))?,
        None => (base_flops.clone(), base_acc),
    };

    // universality: a single fixed patch, no per-image optimization
    assert_eq!(
        autodiff::backward_call_count(),
        backward_before,
        "evaluation must not compute gradients"
    );

    let mean = |v: &[u64]| v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64;
    let flops_unattacked_mean = mean(&base_flops);
    let flops_attacked_mean = mean(&att_flops);
    let attack_success =
        flops::attack_success(flops_attacked_mean, flops_unattacked_mean, flops_max).ok();

    Ok(AttackReport {
        method: model.config().policy().name().to_string(),
        attack: patch.map_or("no_attack".to_string(), |_| "attack".to_string()),
        flops_attacked_mean,
        flops_unattacked_mean,
        flops_max,
        top1_attacked: att_acc,
        top1_unattacked: base_acc,
        attack_success,
        per_image_flops: att_flops,
        empirical_max_flops: None,
        attack_success_empirical: None,
    })
}

/// Metadata persisted next to a patch image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PatchSidecar {
    pub size: usize,
    pub location: (usize, usize),
    pub objective: String,
    pub seed: u64,
    pub model_checksum: String,
    pub iterations: usize,
}

fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

/// Persist as a lossless 8-bit RGB PNG plus a JSON sidecar.
pub fn save_patch(patch: &Patch, sidecar: &PatchSidecar, png_path: &Path) -> Result<()> {
    patch.to_rgb8().save(png_path)?;
    let f = std::fs::File::create(sidecar_path(png_path))?;
    serde_json::to_writer_pretty(f, sidecar)?;
    Ok(())
}

pub fn load_patch(png_path: &Path) -> Result<(Patch, PatchSidecar)> {
    let img = image::open(png_path)?.to_rgb8();
    let f = std::fs::File::open(sidecar_path(png_path))?;
    let sidecar: PatchSidecar = serde_json::from_reader(f)?;
    if img.width() != img.height() || img.width() as usize != sidecar.size {
        return Err(Error::config("patch image does not match its sidecar"));
    }
    let size = sidecar.size;
    let pixels = Array2::from_shape_fn((size * size, 3), |(p, c)| {
        f64::from(img.get_pixel((p % size) as u32, (p / size) as u32).0[c])
    });
    Ok((
        Patch {
            pixels,
            location: sidecar.location,
            size,
        },
        sidecar,
    ))
}
