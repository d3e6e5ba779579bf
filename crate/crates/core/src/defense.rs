//! Adversarial-training defense: train the efficient model against a
//! growing pool of universal patches. The pool starts with one random patch,
//! gains a freshly optimized patch at every 20% mark of each epoch, and each
//! minibatch trains against one uniformly sampled pool member.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::patch::{save_patch, train_patch, AttackObjective, Patch, PatchSidecar, PatchTrainConfig};
use crate::rng;
use crate::train::{train_with_patches, EpochMetrics, TrainConfig};
use crate::vit::VitModel;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Append-only set of adversarial patches with provenance.
#[derive(Debug, Clone)]
pub struct PatchPool {
    entries: Vec<PoolEntry>,
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub patch: Patch,
    /// Fraction of training elapsed when the patch was added.
    pub epoch_fraction: f64,
    /// Optimization budget the patch was trained with.
    pub iterations: usize,
}

impl PatchPool {
    /// Pool seeded with one random (untrained) patch so sampling is defined
    /// from step zero.
    pub fn new(initial: Patch) -> Self {
        PatchPool {
            entries: vec![PoolEntry {
                patch: initial,
                epoch_fraction: 0.0,
                iterations: 0,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Uniform draw, deterministic per seed.
    pub fn sample(&self, seed: u64) -> Result<&Patch> {
        if self.entries.is_empty() {
            return Err(Error::contract("patch pool is empty"));
        }
        let mut rng = rng::substream(seed, "pool-sample", 0);
        let idx = rng.gen_range(0..self.entries.len());
        Ok(&self.entries[idx].patch)
    }

    fn push(&mut self, patch: Patch, epoch_fraction: f64, iterations: usize) {
        self.entries.push(PoolEntry {
            patch,
            epoch_fraction,
            iterations,
        });
    }

    /// Persist as a directory of patch PNGs plus a manifest.
    pub fn save_dir(&self, dir: &Path, model_checksum: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = PoolManifest { entries: vec![] };
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("patch_{i:03}.png");
            save_patch(
                &e.patch,
                &PatchSidecar {
                    size: e.patch.size,
                    location: e.patch.location,
                    objective: "defense-pool".into(),
                    seed: 0,
                    model_checksum: model_checksum.to_string(),
                    iterations: e.iterations,
                },
                &dir.join(&file),
            )?;
            manifest.entries.push(PoolManifestEntry {
                file,
                epoch_fraction: e.epoch_fraction,
                iterations: e.iterations,
            });
        }
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, &manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<PatchPool> {
        let f = std::fs::File::open(dir.join("manifest.json"))?;
        let manifest: PoolManifest = serde_json::from_reader(f)?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let (patch, _) = crate::patch::load_patch(&dir.join(&e.file))?;
            entries.push(PoolEntry {
                patch,
                epoch_fraction: e.epoch_fraction,
                iterations: e.iterations,
            });
        }
        if entries.is_empty() {
            return Err(Error::contract("patch pool manifest is empty"));
        }
        Ok(PatchPool { entries })
    }
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    entries: Vec<PoolManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoolManifestEntry {
    file: String,
    epoch_fraction: f64,
    iterations: usize,
}

/// Defense hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Pool refreshes per epoch (at every 1/refreshes fraction of the epoch).
    pub refreshes_per_epoch: usize,
    /// Iteration budget for each refresh-time patch optimization.
    pub refresh_budget_iterations: usize,
    /// Learning-rate multiplier for refresh-time patch optimization.
    pub refresh_lr_multiplier: f64,
    /// Patch-training settings shared with the attacker.
    pub attack: PatchTrainConfig,
    pub objective: AttackObjective,
    pub patch_size: usize,
    pub patch_location: (usize, usize),
}

impl DefenseConfig {
    pub fn desk_scale(attack: PatchTrainConfig, patch_size: usize, location: (usize, usize)) -> Self {
        DefenseConfig {
            refreshes_per_epoch: 5,
            refresh_budget_iterations: 500,
            refresh_lr_multiplier: 4.0,
            attack,
            objective: AttackObjective::compute_only(),
            patch_size,
            patch_location: location,
        }
    }
}

/// Optimize one new patch against the current model snapshot and append it.
pub fn refresh_pool(
    model: &VitModel,
    dataset: &Dataset,
    pool: &mut PatchPool,
    budget_iterations: usize,
    cfg: &DefenseConfig,
    epoch_fraction: f64,
    seed: u64,
) -> Result<()> {
    let init = Patch::init(
        cfg.patch_size,
        cfg.patch_location,
        model.config().image_size,
        seed,
    )?;
    let mut attack_cfg = cfg.attack.clone();
    attack_cfg.iterations = budget_iterations;
    attack_cfg.lr *= cfg.refresh_lr_multiplier;
    attack_cfg.seed = seed;
    let (patch, _history) = train_patch(model, dataset, &cfg.objective, init, &attack_cfg)?;
    pool.push(patch, epoch_fraction, budget_iterations);
    Ok(())
}

/// Adversarial training: every minibatch sees one uniformly sampled pool
/// patch; the pool is refreshed at every `1/refreshes_per_epoch` mark.
/// Returns the metrics and the final pool.
pub fn adversarial_train(
    model: &mut VitModel,
    train: &Dataset,
    eval: &Dataset,
    train_cfg: &TrainConfig,
    defense_cfg: &DefenseConfig,
) -> Result<(Vec<EpochMetrics>, PatchPool)> {
    let init = Patch::init(
        defense_cfg.patch_size,
        defense_cfg.patch_location,
        model.config().image_size,
        rng::child_seed(train_cfg.seed, "pool-init", 0),
    )?;
    let mut pool = PatchPool::new(init);
    let steps_per_epoch = train.len().div_ceil(train_cfg.batch_size);
    let refreshes = defense_cfg.refreshes_per_epoch.max(1);
    let mut refreshes_done = 0usize;

    let mut provider = |epoch: usize, step: usize, model: &VitModel| -> Result<Option<Patch>> {
        // a refresh is owed for every crossed `1/refreshes` fraction mark
        let t = epoch * steps_per_epoch + step;
        let owed = t * refreshes / steps_per_epoch;
        while refreshes_done < owed {
            refreshes_done += 1;
            let fraction = refreshes_done as f64 / refreshes as f64;
            refresh_pool(
                model,
                train,
                &mut pool,
                defense_cfg.refresh_budget_iterations,
                defense_cfg,
                fraction,
                rng::child_seed(train_cfg.seed, "pool-refresh", refreshes_done as u64),
            )?;
        }
        let sample_seed = rng::child_seed(train_cfg.seed, "pool-draw", t as u64);
        Ok(Some(pool.sample(sample_seed)?.clone()))
    };

    let metrics = train_with_patches(model, train, eval, train_cfg, Some(&mut provider))?;
    drop(provider);

    // the 100% mark of the final epoch lands after the last step
    while refreshes_done < train_cfg.epochs * refreshes {
        refreshes_done += 1;
        refresh_pool(
            model,
            train,
            &mut pool,
            defense_cfg.refresh_budget_iterations,
            defense_cfg,
            refreshes_done as f64 / refreshes as f64,
            rng::child_seed(train_cfg.seed, "pool-refresh", refreshes_done as u64),
        )?;
    }
    Ok((metrics, pool))
}
