//! Dataset ingestion: CIFAR-10 binary batches and a seeded synthetic
//! blob dataset for runs that need no downloads.

use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Environment variable pointing at the dataset root directory.
pub const DATA_ROOT_ENV: &str = "SLOWPATCH_DATA_ROOT";

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Cifar10,
    Synthetic,
}

/// What to load and how to split it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub image_size: usize,
    pub num_classes: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub split_seed: u64,
    /// Directory containing the CIFAR-10 binary batches; defaults to the
    /// `SLOWPATCH_DATA_ROOT` environment variable.
    #[serde(default)]
    pub root: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn synthetic_desk(train_count: usize, eval_count: usize, split_seed: u64) -> Self {
        DatasetSpec {
            source: DatasetSource::Synthetic,
            image_size: 32,
            num_classes: 10,
            train_count,
            eval_count,
            split_seed,
            root: None,
        }
    }

    pub fn cifar10_desk(train_count: usize, eval_count: usize, split_seed: u64) -> Self {
        DatasetSpec {
            source: DatasetSource::Cifar10,
            image_size: CIFAR_SIDE,
            num_classes: 10,
            train_count,
            eval_count,
            split_seed,
            root: None,
        }
    }
}

/// Images stored as channel-interleaved `[H*W*3]` byte rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub image_size: usize,
    pub num_classes: usize,
    images: Vec<Vec<u8>>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }

    /// Pixels of one image as an `[H*W, 3]` matrix in 0..=255 units.
    pub fn pixels(&self, idx: usize) -> Array2<f64> {
        let n = self.image_size * self.image_size;
        let raw = &self.images[idx];
        Array2::from_shape_fn((n, 3), |(p, c)| f64::from(raw[p * 3 + c]))
    }

    fn push(&mut self, image: Vec<u8>, label: usize) {
        debug_assert_eq!(image.len(), self.image_size * self.image_size * 3);
        self.images.push(image);
        self.labels.push(label);
    }
}

/// Load train and eval splits per the spec.
pub fn load(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec.source {
        DatasetSource::Synthetic => Ok((
            synthetic(spec, "train", spec.train_count),
            synthetic(spec, "eval", spec.eval_count),
        )),
        DatasetSource::Cifar10 => load_cifar10(spec),
    }
}

/// Resolve the dataset root: explicit spec field, then environment variable.
pub fn resolve_root(spec: &DatasetSpec) -> Result<PathBuf> {
    if let Some(root) = &spec.root {
        return Ok(root.clone());
    }
    if let Ok(v) = std::env::var(DATA_ROOT_ENV) {
        return Ok(PathBuf::from(v));
    }
    Err(Error::dataset(format!(
        "no dataset root: set {DATA_ROOT_ENV} or the spec's root field"
    )))
}

/// Seeded gaussian-blob classes: class determines blob position on a ring
/// and its color; per-image jitter keeps the task non-trivial.
pub fn synthetic(spec: &DatasetSpec, split: &str, count: usize) -> Dataset {
    let s = spec.image_size;
    let mut ds = Dataset {
        name: format!("synthetic-{split}"),
        image_size: s,
        num_classes: spec.num_classes,
        images: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
    };
    for idx in 0..count {
        let mut rng = rng::substream(spec.split_seed, &format!("synthetic-{split}"), idx as u64);
        let label = idx % spec.num_classes;
        let angle = 2.0 * std::f64::consts::PI * label as f64 / spec.num_classes as f64;
        let jitter_x: f64 = rng.gen_range(-2.0..2.0);
        let jitter_y: f64 = rng.gen_range(-2.0..2.0);
        let cx = s as f64 / 2.0 + 0.30 * s as f64 * angle.cos() + jitter_x;
        let cy = s as f64 / 2.0 + 0.30 * s as f64 * angle.sin() + jitter_y;
        let sigma = s as f64 / 7.0 * rng.gen_range(0.85..1.15);
        let color = class_color(label, spec.num_classes);
        let intensity: f64 = rng.gen_range(0.8..1.0);

        let mut img = vec![0u8; s * s * 3];
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let blob = intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    let bg: f64 = rng.gen_range(0.0..40.0);
                    let v = bg + blob * color[c] * 215.0;
                    img[(y * s + x) * 3 + c] = v.clamp(0.0, 255.0) as u8;
                }
            }
        }
        ds.push(img, label);
    }
    ds
}

fn class_color(label: usize, num_classes: usize) -> [f64; 3] {
    // evenly spaced hues, full saturation
    let h = label as f64 / num_classes as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Read CIFAR-10 binary batches (`data_batch_*.bin` for train,
/// `test_batch.bin` for eval) and take seeded subsets.
fn load_cifar10(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.image_size != CIFAR_SIDE {
        return Err(Error::config(format!(
            "cifar10 images are {CIFAR_SIDE}x{CIFAR_SIDE}, config says {}",
            spec.image_size
        )));
    }
    let root = resolve_root(spec)?;
    let train_files: Vec<PathBuf> = (1..=5)
        .map(|i| root.join(format!("data_batch_{i}.bin")))
        .collect();
    let eval_files = vec![root.join("test_batch.bin")];

    let train_pool = read_cifar_files(&train_files, spec)?;
    let eval_pool = read_cifar_files(&eval_files, spec)?;
    Ok((
        subset(train_pool, spec.train_count, spec.split_seed, "cifar-train"),
        subset(eval_pool, spec.eval_count, spec.split_seed, "cifar-eval"),
    ))
}

fn read_cifar_files(files: &[PathBuf], spec: &DatasetSpec) -> Result<Dataset> {
    let mut ds = Dataset {
        name: "cifar10".into(),
        image_size: CIFAR_SIDE,
        num_classes: spec.num_classes,
        images: Vec::new(),
        labels: Vec::new(),
    };
    let mut found_any = false;
    for path in files {
        if !path.exists() {
            continue;
        }
        found_any = true;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::dataset(format!(
                "{} is not a multiple of the {CIFAR_RECORD}-byte record size",
                path.display()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label >= spec.num_classes {
                return Err(Error::dataset(format!("label {label} out of range")));
            }
            // planar RGB -> interleaved
            let n = CIFAR_SIDE * CIFAR_SIDE;
            let mut img = vec![0u8; n * 3];
            for p in 0..n {
                img[p * 3] = rec[1 + p];
                img[p * 3 + 1] = rec[1 + n + p];
                img[p * 3 + 2] = rec[1 + 2 * n + p];
            }
            ds.push(img, label);
        }
    }
    if !found_any {
        return Err(Error::dataset(format!(
            "no CIFAR-10 batch files found under {}",
            files
                .first()
                .and_then(|f| f.parent())
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        )));
    }
    Ok(ds)
}

fn subset(pool: Dataset, count: usize, seed: u64, tag: &str) -> Dataset {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = rng::substream(seed, tag, 0);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let take = count.min(pool.len());
    let mut out = Dataset {
        name: pool.name.clone(),
        image_size: pool.image_size,
        num_classes: pool.num_classes,
        images: Vec::with_capacity(take),
        labels: Vec::with_capacity(take),
    };
    for &i in order.iter().take(take) {
        out.push(pool.images[i].clone(), pool.labels[i]);
    }
    out
}

/// True when CIFAR-10 batches are reachable (used to pick the dataset for
/// desk-scale runs without failing in download-free environments).
pub fn cifar10_available(explicit_root: Option<&Path>) -> bool {
    let root = match explicit_root {
        Some(r) => r.to_path_buf(),
        None => match std::env::var(DATA_ROOT_ENV) {
            Ok(v) => PathBuf::from(v),
            Err(_) => return false,
        },
    };
    root.join("data_batch_1.bin").exists() && root.join("test_batch.bin").exists()
}
