//! Analytic FLOPs accounting for (partially masked) transformer forwards,
//! plus the attack-success metric.
//!
//! Convention: one multiply-accumulate costs 2 FLOPs; softmax, normalization
//! and activation costs are excluded (the attention scale factor is treated
//! as folded into the query projection). Head masking reduces the
//! attention-path cost proportionally, but the out-projection always runs at
//! full width because masked heads still occupy the projection matrix.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::vit::{ComputeTrace, MaskMode};
use crate::PolicyKind;
use serde::{Deserialize, Serialize};

/// FLOPs by component, summed over layers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub qkv: u64,
    pub attn_logits: u64,
    pub attn_apply: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub embed: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.qkv + self.attn_logits + self.attn_apply + self.out_proj + self.mlp + self.embed
            + self.head
    }
}

/// FLOPs of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<u64>,
    pub total: u64,
    pub breakdown: FlopsBreakdown,
}

/// Per-component FLOPs of one block over `n_active` tokens.
pub fn block_flops_breakdown(
    n_active: u64,
    embed_dim: u64,
    heads_active: u64,
    heads_total: u64,
    mlp_ratio: u64,
    block_on: bool,
) -> (u64, u64, u64, u64, u64) {
    assert!(heads_total > 0 && embed_dim % heads_total == 0);
    assert!(heads_active <= heads_total);
    if !block_on || n_active == 0 {
        return (0, 0, 0, 0, 0);
    }
    let head_dim = embed_dim / heads_total;
    let d_attn_active = head_dim * heads_active;
    let qkv = 2 * 3 * n_active * embed_dim * d_attn_active;
    let attn_logits = 2 * n_active * n_active * d_attn_active;
    let attn_apply = 2 * n_active * n_active * d_attn_active;
    let out_proj = 2 * n_active * embed_dim * embed_dim;
    let mlp = 2 * 2 * n_active * embed_dim * (mlp_ratio * embed_dim);
    (qkv, attn_logits, attn_apply, out_proj, mlp)
}

/// Total FLOPs of one block.
pub fn block_flops(
    n_active: u64,
    embed_dim: u64,
    heads_active: u64,
    heads_total: u64,
    mlp_ratio: u64,
    block_on: bool,
) -> u64 {
    let (qkv, logits, apply, proj, mlp) =
        block_flops_breakdown(n_active, embed_dim, heads_active, heads_total, mlp_ratio, block_on);
    qkv + logits + apply + proj + mlp
}

fn embed_flops(config: &ModelConfig) -> u64 {
    let patches = (config.num_tokens() - 1) as u64;
    2 * patches * config.patch_dim() as u64 * config.embed_dim as u64
}

fn head_flops(config: &ModelConfig) -> u64 {
    2 * config.embed_dim as u64 * config.num_classes as u64
}

/// FLOPs of a forward pass as recorded in a trace.
pub fn trace_flops(trace: &ComputeTrace, config: &ModelConfig) -> Result<FlopsReport> {
    if trace.layers.len() != config.num_layers {
        return Err(Error::contract(format!(
            "trace has {} layers, config expects {}",
            trace.layers.len(),
            config.num_layers
        )));
    }
    if trace.policy != config.policy() {
        return Err(Error::contract("trace/config policy mismatch"));
    }
    if trace.policy == PolicyKind::Adavit && trace.mask_mode == MaskMode::Soft {
        return Err(Error::contract(
            "FLOPs accounting requires hard masks; soft masks exist only for gradients",
        ));
    }
    let d = config.embed_dim as u64;
    let h = config.num_heads as u64;
    let r = config.mlp_ratio as u64;
    let mut breakdown = FlopsBreakdown {
        embed: embed_flops(config),
        head: head_flops(config),
        ..Default::default()
    };
    let mut per_layer = Vec::with_capacity(trace.layers.len());
    for layer in &trace.layers {
        if layer.active_in.len() != config.num_tokens() {
            return Err(Error::contract("trace token count mismatch"));
        }
        let (qkv, logits, apply, proj, mlp) = block_flops_breakdown(
            layer.n_active as u64,
            d,
            layer.heads_active as u64,
            h,
            r,
            layer.block_on,
        );
        breakdown.qkv += qkv;
        breakdown.attn_logits += logits;
        breakdown.attn_apply += apply;
        breakdown.out_proj += proj;
        breakdown.mlp += mlp;
        per_layer.push(qkv + logits + apply + proj + mlp);
    }
    Ok(FlopsReport {
        per_layer,
        total: breakdown.total(),
        breakdown,
    })
}

/// Static compute of the architecture with nothing masked.
pub fn architectural_max_flops(config: &ModelConfig) -> u64 {
    let n = config.num_tokens() as u64;
    let d = config.embed_dim as u64;
    let h = config.num_heads as u64;
    let r = config.mlp_ratio as u64;
    embed_flops(config)
        + head_flops(config)
        + config.num_layers as u64 * block_flops(n, d, h, h, r, true)
}

/// `(flops_attack - flops_min) / (flops_max - flops_min)`.
///
/// 1 means the adaptive saving was fully undone; negative values mean the
/// attack reduced compute further.
pub fn attack_success(flops_attack: f64, flops_min: f64, flops_max: f64) -> Result<f64> {
    if !(flops_max > flops_min) {
        return Err(Error::domain(format!(
            "flops_max ({flops_max}) must exceed flops_min ({flops_min})"
        )));
    }
    Ok((flops_attack - flops_min) / (flops_max - flops_min))
}
