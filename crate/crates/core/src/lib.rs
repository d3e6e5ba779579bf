//! Compute-inflation attacks on input-adaptive vision transformers.
//!
//! Input-adaptive transformers spend FLOPs proportional to how "hard" an
//! image looks: tokens halt early, get subsampled, or whole heads/blocks are
//! gated off. This crate implements a universal adversarial patch that is
//! trained once on a train split and, pasted at a fixed location on any test
//! image, drives the model back toward its worst-case compute. It also ships
//! the matching FLOPs ledger, accuracy/compute baselines (random patch,
//! targeted/non-targeted patches), and an adversarial-training defense that
//! hardens a backbone against a growing pool of such patches.
//!
//! Everything runs on a small, self-contained reverse-mode autodiff tape in
//! `f64`, so gradients are exact enough to validate against finite
//! differences, and all randomness flows from explicit seeds.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod flops;
pub mod optim;
pub mod parallel;
pub mod patch;
pub mod policy;
pub mod report;
pub mod rng;
pub mod train;
pub mod vit;

pub use config::{AdavitParams, AtsParams, HaltingParams, ModelConfig, PolicyKind, PolicyParams};
pub use error::{Error, Result};
pub use flops::{attack_success, block_flops, trace_flops, FlopsBreakdown, FlopsReport};
pub use patch::{AttackObjective, Patch};
pub use report::AttackReport;
pub use vit::{ComputeTrace, ForwardOptions, ForwardPass, MaskMode, VitModel};
