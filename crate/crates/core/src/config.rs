//! Model and policy configuration, serialized as JSON.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which input-adaptive policy the model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Static compute; every token flows through every block.
    None,
    /// Cumulative token halting with threshold `1 - epsilon`.
    Avit,
    /// Score-based token subsampling at selected layers.
    Ats,
    /// Learned per-block gating of patches, heads and blocks.
    Adavit,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::Avit => "avit",
            PolicyKind::Ats => "ats",
            PolicyKind::Adavit => "adavit",
        }
    }
}

/// Token-halting policy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltingParams {
    /// Threshold slack: a token halts once its cumulative score reaches `1 - epsilon`.
    pub epsilon: f64,
    /// Gain applied to embedding dimension 0 inside the halting gate.
    pub gate_gain: f64,
    /// Offset applied inside the halting gate.
    pub gate_bias: f64,
    /// Weight of the distribution loss in training and attack objectives.
    pub alpha_d: f64,
    /// Weight of the ponder loss in training and attack objectives.
    pub alpha_p: f64,
    /// Center (1-indexed layer, fractional allowed) of the Gaussian prior
    /// on expected halting depth.
    pub target_layer: f64,
    /// Standard deviation of the Gaussian prior.
    pub prior_std: f64,
}

impl HaltingParams {
    pub fn defaults_for(num_layers: usize) -> Self {
        HaltingParams {
            epsilon: 0.01,
            // biased low so an untrained model keeps all tokens
            gate_gain: 5.0,
            gate_bias: -10.0,
            alpha_d: 0.1,
            alpha_p: 0.001,
            target_layer: 0.5 * (num_layers as f64 + 1.0),
            prior_std: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!(
                "epsilon must be in (0,1), got {}",
                self.epsilon
            )));
        }
        if self.prior_std <= 0.0 {
            return Err(Error::config("prior_std must be positive"));
        }
        Ok(())
    }
}

/// Token-sampling policy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtsParams {
    /// 1-indexed layers whose attention blocks subsample their tokens.
    pub ats_layers: Vec<usize>,
    /// Cap on the retained token count per layer (class token included).
    pub max_tokens: usize,
    /// Per-layer weights of the attack loss, aligned with `ats_layers`.
    pub layer_loss_weights: Vec<f64>,
}

impl AtsParams {
    /// Middle-of-the-stack layers with decaying loss weights
    /// (1.0, then 0.2, then 0.01 for deep layers).
    pub fn defaults_for(num_layers: usize, num_tokens: usize) -> Self {
        let lo = (num_layers / 4).max(2);
        let hi = (3 * num_layers / 4).max(lo);
        let layers: Vec<usize> = (lo..=hi).collect();
        let weights: Vec<f64> = (0..layers.len())
            .map(|i| match i {
                0 => 1.0,
                1..=3 => 0.2,
                _ => 0.01,
            })
            .collect();
        AtsParams {
            ats_layers: layers,
            max_tokens: num_tokens,
            layer_loss_weights: weights,
        }
    }

    fn validate(&self, num_layers: usize) -> Result<()> {
        if self.ats_layers.is_empty() {
            return Err(Error::config("ats_layers must be non-empty"));
        }
        for &l in &self.ats_layers {
            if l < 1 || l > num_layers {
                return Err(Error::config(format!(
                    "ats layer {l} outside 1..={num_layers}"
                )));
            }
        }
        if self.max_tokens < 1 {
            return Err(Error::config("max_tokens must be >= 1"));
        }
        if self.layer_loss_weights.len() != self.ats_layers.len() {
            return Err(Error::config(
                "layer_loss_weights must align with ats_layers",
            ));
        }
        if self.layer_loss_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::config("layer loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Decision-network gating parameters (the per-block gate weights live in
/// the model checkpoint; this is the sampling/targets side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdavitParams {
    /// Gumbel-sigmoid temperature used for soft masks.
    pub gumbel_temperature: f64,
    /// Target keep-ratios (patches, heads, blocks) for the usage loss.
    pub gammas: (f64, f64, f64),
}

impl AdavitParams {
    pub fn defaults() -> Self {
        AdavitParams {
            gumbel_temperature: 1.0,
            gammas: (0.7, 0.7, 0.8),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.gumbel_temperature <= 0.0 {
            return Err(Error::config("gumbel_temperature must be positive"));
        }
        let (p, h, b) = self.gammas;
        for g in [p, h, b] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(format!("gamma {g} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Policy-specific parameter record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicyParams {
    None,
    Avit(HaltingParams),
    Ats(AtsParams),
    Adavit(AdavitParams),
}

impl PolicyParams {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyParams::None => PolicyKind::None,
            PolicyParams::Avit(_) => PolicyKind::Avit,
            PolicyParams::Ats(_) => PolicyKind::Ats,
            PolicyParams::Adavit(_) => PolicyKind::Adavit,
        }
    }

    pub fn avit(&self) -> Result<&HaltingParams> {
        match self {
            PolicyParams::Avit(p) => Ok(p),
            _ => Err(Error::contract("policy params are not avit")),
        }
    }

    pub fn ats(&self) -> Result<&AtsParams> {
        match self {
            PolicyParams::Ats(p) => Ok(p),
            _ => Err(Error::contract("policy params are not ats")),
        }
    }

    pub fn adavit(&self) -> Result<&AdavitParams> {
        match self {
            PolicyParams::Adavit(p) => Ok(p),
            _ => Err(Error::contract("policy params are not adavit")),
        }
    }
}

/// Architecture and policy hyperparameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Square embedding-patch side in pixels.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub policy_params: PolicyParams,
    /// Per-channel pixel mean, in [0,1] units applied after the /255 rescale.
    #[serde(default = "default_pixel_mean")]
    pub pixel_mean: [f64; 3],
    /// Per-channel pixel std, in [0,1] units.
    #[serde(default = "default_pixel_std")]
    pub pixel_std: [f64; 3],
}

fn default_mlp_ratio() -> usize {
    4
}
fn default_pixel_mean() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}
fn default_pixel_std() -> [f64; 3] {
    [0.25, 0.25, 0.25]
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, dim 64, 4 heads on 32x32 images with
    /// 8-pixel embedding patches (17 tokens).
    pub fn desk_scale(policy: PolicyParams) -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            policy_params: policy,
            pixel_mean: default_pixel_mean(),
            pixel_std: default_pixel_std(),
        }
    }

    /// Tiny config for gradient checks: 2 layers, dim 16, 2 heads, 16x16
    /// images with 8-pixel patches (5 tokens).
    pub fn tiny(policy: PolicyParams) -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            policy_params: policy,
            pixel_mean: default_pixel_mean(),
            pixel_std: default_pixel_std(),
        }
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy_params.kind()
    }

    /// Tokens per image including the class token.
    pub fn num_tokens(&self) -> usize {
        let grid = self.image_size / self.patch_size;
        1 + grid * grid
    }

    /// Flattened pixel dimension of one embedding patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::config("image_size and patch_size must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("pixel_std entries must be positive"));
        }
        match &self.policy_params {
            PolicyParams::None => Ok(()),
            PolicyParams::Avit(p) => p.validate(),
            PolicyParams::Ats(p) => p.validate(self.num_layers),
            PolicyParams::Adavit(p) => p.validate(),
        }
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let cfg: ModelConfig = serde_json::from_reader(f)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
