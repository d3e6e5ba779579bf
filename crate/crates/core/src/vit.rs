//! Vision-transformer substrate with mask hooks for input-adaptive policies.
//!
//! The forward pass is built on the autodiff [`Tape`] so every downstream
//! loss is differentiable back to the input pixels. Token dropping is
//! implemented by masking, never by reshaping: inactive tokens are excluded
//! as attention keys/values with an additive `-1e9` logit mask and their
//! embeddings are frozen. The excluded keys underflow to exactly zero
//! attention weight, so masking matches physical removal bit-for-bit while
//! keeping shapes static and gradients exact.

use crate::autodiff::{Gradients, Tape, Var};
use crate::config::{ModelConfig, PolicyKind, PolicyParams};
use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::policy::adavit::KeepMasks;
use crate::policy::ats;
use crate::policy::avit::HaltingRecord;
use crate::rng;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

const LN_EPS: f64 = 1e-6;
const KEY_MASK: f64 = -1e9;
const CHECKPOINT_VERSION: u32 = 1;

/// Whether policy masks are continuous relaxations or hard 0/1 decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Differentiable masks; used while optimizing patches or training.
    Soft,
    /// Discrete masks (straight-through where needed); used for evaluation
    /// and FLOPs accounting.
    Hard,
}

/// Options controlling one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub mode: MaskMode,
    /// Seed for gumbel noise (gating policy only).
    pub gumbel_seed: u64,
    /// Record full per-head attention matrices in the trace.
    pub record_attention: bool,
}

impl ForwardOptions {
    pub fn training(gumbel_seed: u64) -> Self {
        ForwardOptions {
            mode: MaskMode::Soft,
            gumbel_seed,
            record_attention: false,
        }
    }

    pub fn evaluation(gumbel_seed: u64) -> Self {
        ForwardOptions {
            mode: MaskMode::Hard,
            gumbel_seed,
            record_attention: true,
        }
    }
}

/// Token embeddings plus activity mask; the class token sits at row 0 and is
/// always active.
#[derive(Debug, Clone)]
pub struct TokenState {
    pub embeddings: Array2<f64>,
    pub active: Vec<bool>,
}

impl TokenState {
    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Per-layer record of what the block actually computed.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Tokens this block processed (for the gating policy this is the hard
    /// keep-mask; class token always true).
    pub active_in: Vec<bool>,
    /// Number of tokens this block processed (class token included).
    pub n_active: usize,
    pub heads_active: usize,
    pub block_on: bool,
    /// Per-head attention matrices, row-stochastic over active tokens.
    pub attention: Vec<Array2<f64>>,
    /// Token indices retained by sampling at this layer (sampling policy).
    pub sampled: Option<Vec<usize>>,
    /// Set when significance scores degenerated and a uniform fallback was used.
    pub ats_uniform_fallback: bool,
}

/// Everything the forward pass recorded, detached from the tape. This is the
/// bridge between a forward pass and FLOPs accounting / loss evaluation.
#[derive(Debug, Clone)]
pub struct ComputeTrace {
    pub policy: PolicyKind,
    pub mask_mode: MaskMode,
    pub layers: Vec<LayerTrace>,
    pub logits: Vec<f64>,
    pub halting: Option<HaltingRecord>,
    pub keep_masks: Option<KeepMasks>,
}

impl ComputeTrace {
    /// Retained token count entering each layer.
    pub fn retained_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.n_active).collect()
    }

    pub fn predicted_class(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Tape-side handles the policy losses are built from.
pub enum PolicyGraph {
    None,
    Avit(AvitGraph),
    Ats(AtsGraph),
    Adavit(AdavitGraph),
}

/// Halting-score nodes, one `[K,1]` column per layer (zeroed for tokens that
/// already dropped).
pub struct AvitGraph {
    pub h_layers: Vec<Var>,
}

pub struct AtsLayerGraph {
    /// 1-indexed layer this entry belongs to.
    pub layer: usize,
    /// Class-token attention row per head, `[1, T]`.
    pub class_rows: Vec<Var>,
    /// Activity mask of tokens entering the layer.
    pub active: Vec<bool>,
    /// Active token count (class included) — the `N` in the uniform target.
    pub n_active: usize,
}

pub struct AtsGraph {
    pub layers: Vec<AtsLayerGraph>,
}

/// Per-layer gate mask nodes: patch `[K,1]`, head `[1,H]`, block `[1,1]`.
pub struct AdavitGraph {
    pub patch: Vec<Var>,
    pub head: Vec<Var>,
    pub block: Vec<Var>,
}

/// A completed forward pass: the tape, the output logits node, the input
/// pixel node (for patch gradients) and the recorded trace.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub image: Var,
    pub trace: ComputeTrace,
    pub policy_graph: PolicyGraph,
    param_nodes: Vec<(usize, Var)>,
}

impl ForwardPass {
    /// Gradient of the loss w.r.t. the input pixels, in [0,255] pixel units.
    pub fn pixel_gradient(&self, grads: &Gradients) -> Array2<f64> {
        grads.wrt(&self.tape, self.image)
    }

    /// Accumulate parameter gradients into `acc` (aligned with the model's
    /// parameter order).
    pub fn accumulate_param_gradients(&self, grads: &Gradients, acc: &mut [Array2<f64>]) {
        for (idx, var) in &self.param_nodes {
            acc[*idx] += &grads.wrt(&self.tape, *var);
        }
    }
}

struct ParamEntry {
    name: String,
    value: Arc<Array2<f64>>,
}

/// The model: a config plus named parameter blocks.
pub struct VitModel {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl VitModel {
    /// Initialize a model with seeded small-normal weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, "model-init", 0);
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let t = config.num_tokens();
        let mut params: Vec<ParamEntry> = Vec::new();

        let mut normal = |rows: usize, cols: usize, std: f64| -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
        };
        fn push(params: &mut Vec<ParamEntry>, name: String, value: Array2<f64>) {
            params.push(ParamEntry {
                name,
                value: Arc::new(value),
            });
        }

        push(&mut params, "embed.proj.w".into(), normal(config.patch_dim(), d, 0.02));
        push(&mut params, "embed.proj.b".into(), Array2::zeros((1, d)));
        push(&mut params, "embed.cls".into(), normal(1, d, 0.02));
        push(&mut params, "embed.pos".into(), normal(t, d, 0.02));
        for l in 0..config.num_layers {
            push(&mut params, format!("block{l}.ln1.g"), Array2::ones((1, d)));
            push(&mut params, format!("block{l}.ln1.b"), Array2::zeros((1, d)));
            push(&mut params, format!("block{l}.attn.wq"), normal(d, d, 0.02));
            push(&mut params, format!("block{l}.attn.bq"), Array2::zeros((1, d)));
            push(&mut params, format!("block{l}.attn.wk"), normal(d, d, 0.02));
            push(&mut params, format!("block{l}.attn.bk"), Array2::zeros((1, d)));
            push(&mut params, format!("block{l}.attn.wv"), normal(d, d, 0.02));
            push(&mut params, format!("block{l}.attn.bv"), Array2::zeros((1, d)));
            // no bias on the out-projection: fully-masked heads must
            // contribute exactly nothing
            push(&mut params, format!("block{l}.attn.wo"), normal(d, d, 0.02));
            push(&mut params, format!("block{l}.ln2.g"), Array2::ones((1, d)));
            push(&mut params, format!("block{l}.ln2.b"), Array2::zeros((1, d)));
            push(&mut params, format!("block{l}.mlp.w1"), normal(d, hidden, 0.02));
            push(&mut params, format!("block{l}.mlp.b1"), Array2::zeros((1, hidden)));
            push(&mut params, format!("block{l}.mlp.w2"), normal(hidden, d, 0.02));
            push(&mut params, format!("block{l}.mlp.b2"), Array2::zeros((1, d)));
            if config.policy() == PolicyKind::Adavit {
                push(&mut params, format!("block{l}.gate.wp"), normal(d, 1, 0.02));
                push(
                    &mut params,
                    format!("block{l}.gate.wh"),
                    normal(d, config.num_heads, 0.02),
                );
                push(&mut params, format!("block{l}.gate.wb"), normal(d, 1, 0.02));
            }
        }
        push(&mut params, "final.ln.g".into(), Array2::ones((1, d)));
        push(&mut params, "final.ln.b".into(), Array2::zeros((1, d)));
        push(&mut params, "head.w".into(), normal(d, config.num_classes, 0.02));
        push(&mut params, "head.b".into(), Array2::zeros((1, config.num_classes)));

        Ok(VitModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn param(&self, idx: usize) -> &Array2<f64> {
        &self.params[idx].value
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.params[idx].value)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn find(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn shared_param(&self, tape: &mut Tape, nodes: &mut Vec<(usize, Var)>, name: &str) -> Var {
        let idx = self.find(name);
        let v = tape.shared(Arc::clone(&self.params[idx].value));
        nodes.push((idx, v));
        v
    }

    /// Same weights under different policy parameters (e.g. evaluating the
    /// static-compute ceiling of an adaptive model, or wrapping a backbone
    /// with the sampling policy).
    pub fn with_policy_params(&self, policy: PolicyParams) -> Result<VitModel> {
        let mut config = self.config.clone();
        config.policy_params = policy;
        config.validate()?;
        if config.policy() == PolicyKind::Adavit
            && !self.params.iter().any(|p| p.name.ends_with("gate.wp"))
        {
            return Err(Error::contract(
                "model has no gate parameters; it was not initialized for the gating policy",
            ));
        }
        Ok(VitModel {
            config,
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    value: Arc::clone(&p.value),
                })
                .collect(),
        })
    }

    /// SHA-256 over the parameter blocks; changes iff any weight changes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| CheckpointParam {
                    name: p.name.clone(),
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                    data: p.value.iter().cloned().collect(),
                })
                .collect(),
        };
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(f)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        file.config.validate()?;
        let params = file
            .params
            .into_iter()
            .map(|p| {
                let arr = Array2::from_shape_vec((p.rows, p.cols), p.data)
                    .map_err(|e| Error::config(format!("bad param shape for {}: {e}", p.name)))?;
                Ok(ParamEntry {
                    name: p.name,
                    value: Arc::new(arr),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VitModel {
            config: file.config,
            params,
        })
    }

    /// Embed pixels into tokens (class token first, all active).
    pub fn patch_embed(&self, pixels: &Array2<f64>) -> Result<TokenState> {
        self.check_pixels(pixels)?;
        let mut tape = Tape::new();
        let mut nodes = Vec::new();
        let image = tape.input(pixels.clone());
        let tokens = self.embed_graph(&mut tape, &mut nodes, image);
        Ok(TokenState {
            embeddings: tape.value(tokens).clone(),
            active: vec![true; self.config.num_tokens()],
        })
    }

    /// Run one block over an explicit token state with explicit masks.
    pub fn block_forward(
        &self,
        state: &TokenState,
        layer: usize,
        head_mask: &[bool],
        block_on: bool,
    ) -> Result<(TokenState, LayerTrace)> {
        if layer >= self.config.num_layers {
            return Err(Error::contract(format!(
                "layer {layer} out of range 0..{}",
                self.config.num_layers
            )));
        }
        if head_mask.len() != self.config.num_heads {
            return Err(Error::contract("head_mask length != num_heads"));
        }
        if state.embeddings.ncols() != self.config.embed_dim
            || state.active.len() != state.embeddings.nrows()
        {
            return Err(Error::contract("token state shape mismatch"));
        }
        if !state.active[0] {
            return Err(Error::contract("class token must be active"));
        }
        let mut tape = Tape::new();
        let mut nodes = Vec::new();
        let x = tape.input(state.embeddings.clone());
        let out = self.block_graph(
            &mut tape,
            &mut nodes,
            x,
            layer,
            &state.active,
            head_mask,
            block_on,
            None,
            true,
        );
        let trace = LayerTrace {
            active_in: state.active.clone(),
            n_active: state.num_active(),
            heads_active: head_mask.iter().filter(|h| **h).count(),
            block_on,
            attention: out.attention,
            sampled: None,
            ats_uniform_fallback: false,
        };
        Ok((
            TokenState {
                embeddings: tape.value(out.x).clone(),
                active: state.active.clone(),
            },
            trace,
        ))
    }

    /// Full forward pass; pastes `patch` first when given.
    pub fn forward(
        &self,
        pixels: &Array2<f64>,
        patch: Option<&Patch>,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass> {
        self.check_pixels(pixels)?;
        let mut pix = pixels.clone();
        if let Some(p) = patch {
            p.paste_into(&mut pix, self.config.image_size)?;
        }

        let heads = self.config.num_heads;
        let all_heads = vec![true; heads];
        let mut tape = Tape::new();
        let mut param_nodes = Vec::new();
        let image = tape.input(pix);
        let mut x = self.embed_graph(&mut tape, &mut param_nodes, image);

        let mut active = vec![true; self.config.num_tokens()];
        let mut layers: Vec<LayerTrace> = Vec::with_capacity(self.config.num_layers);
        let mut avit = AvitState::new(&self.config);
        let mut ats_graph: Vec<AtsLayerGraph> = Vec::new();
        let mut adavit = AdavitState::new(&self.config);

        for layer in 0..self.config.num_layers {
            let n_active_in = active.iter().filter(|a| **a).count();
            let want_rows = self.config.policy() == PolicyKind::Ats && self.ats_layer_enabled(layer);

            let gates = if self.config.policy() == PolicyKind::Adavit {
                Some(adavit.decide(self, &mut tape, &mut param_nodes, x, layer, opts))
            } else {
                None
            };

            let (n_active_block, heads_active, block_on_flag, key_active) = match &gates {
                Some(g) => (g.n_active, g.heads_active, g.block_on, g.key_active.clone()),
                None => (n_active_in, heads, true, active.clone()),
            };

            let out = self.block_graph(
                &mut tape,
                &mut param_nodes,
                x,
                layer,
                &key_active,
                &all_heads,
                true,
                gates.as_ref(),
                opts.record_attention || want_rows,
            );
            x = out.x;

            let mut trace = LayerTrace {
                active_in: key_active,
                n_active: n_active_block,
                heads_active,
                block_on: block_on_flag,
                attention: if opts.record_attention {
                    out.attention.clone()
                } else {
                    Vec::new()
                },
                sampled: None,
                ats_uniform_fallback: false,
            };

            match self.config.policy() {
                PolicyKind::Avit => {
                    avit.observe(self, &mut tape, x, &mut active, layer);
                }
                PolicyKind::Ats if want_rows => {
                    let fallback =
                        self.ats_sample(&mut tape, &out, layer, &mut active, &mut ats_graph, &mut trace)?;
                    trace.ats_uniform_fallback = fallback;
                }
                _ => {}
            }
            layers.push(trace);

            debug_assert!(
                layers.len() < 2
                    || !matches!(self.config.policy(), PolicyKind::Avit | PolicyKind::Ats)
                    || layers[layers.len() - 1].n_active <= layers[layers.len() - 2].n_active,
                "retained token count must be non-increasing"
            );
        }

        // classifier head reads the class token only
        let logits = {
            let g = self.shared_param(&mut tape, &mut param_nodes, "final.ln.g");
            let b = self.shared_param(&mut tape, &mut param_nodes, "final.ln.b");
            let normed = tape.layer_norm_rows(x, g, b, LN_EPS);
            let cls = tape.slice_rows(normed, 0, 1);
            let w = self.shared_param(&mut tape, &mut param_nodes, "head.w");
            let hb = self.shared_param(&mut tape, &mut param_nodes, "head.b");
            let z = tape.matmul(cls, w);
            tape.add_row(z, hb)
        };

        let (policy_graph, halting, keep_masks) = match self.config.policy() {
            PolicyKind::None => (PolicyGraph::None, None, None),
            PolicyKind::Avit => {
                let (graph, record) = avit.finish(&self.config);
                (PolicyGraph::Avit(graph), Some(record), None)
            }
            PolicyKind::Ats => (PolicyGraph::Ats(AtsGraph { layers: ats_graph }), None, None),
            PolicyKind::Adavit => {
                let (graph, masks) = adavit.finish(&tape, opts.mode);
                (PolicyGraph::Adavit(graph), None, Some(masks))
            }
        };

        let logits_vec = tape.value(logits).row(0).to_vec();
        Ok(ForwardPass {
            trace: ComputeTrace {
                policy: self.config.policy(),
                mask_mode: opts.mode,
                layers,
                logits: logits_vec,
                halting,
                keep_masks,
            },
            tape,
            logits,
            image,
            policy_graph,
            param_nodes,
        })
    }

    fn check_pixels(&self, pixels: &Array2<f64>) -> Result<()> {
        let n = self.config.image_size * self.config.image_size;
        if pixels.dim() != (n, 3) {
            return Err(Error::config(format!(
                "pixel matrix is {:?}, expected ({n}, 3) for image_size {}",
                pixels.dim(),
                self.config.image_size
            )));
        }
        Ok(())
    }

    fn ats_layer_enabled(&self, layer0: usize) -> bool {
        match &self.config.policy_params {
            PolicyParams::Ats(p) => p.ats_layers.contains(&(layer0 + 1)),
            _ => false,
        }
    }

    fn embed_graph(&self, tape: &mut Tape, nodes: &mut Vec<(usize, Var)>, image: Var) -> Var {
        let inv = Array2::from_shape_fn((1, 3), |(_, c)| 1.0 / (255.0 * self.config.pixel_std[c]));
        let shift = Array2::from_shape_fn((1, 3), |(_, c)| {
            -self.config.pixel_mean[c] / self.config.pixel_std[c]
        });
        let inv = tape.constant(inv);
        let shift = tape.constant(shift);
        let xn = tape.mul_row(image, inv);
        let xn = tape.add_row(xn, shift);
        let patches = tape.extract_patches(xn, self.config.image_size, self.config.patch_size, 3);
        let w = self.shared_param(tape, nodes, "embed.proj.w");
        let b = self.shared_param(tape, nodes, "embed.proj.b");
        let proj = tape.matmul(patches, w);
        let proj = tape.add_row(proj, b);
        let cls = self.shared_param(tape, nodes, "embed.cls");
        let tokens = tape.concat_rows(&[cls, proj]);
        let pos = self.shared_param(tape, nodes, "embed.pos");
        tape.add(tokens, pos)
    }

    /// One transformer block on the tape.
    ///
    /// `key_active` controls which tokens serve as keys/values (additive
    /// `-1e9` exclusion) and which embeddings update; `head_mask`/`block_on`
    /// are hard structural gates; `gates` supplies the differentiable gate
    /// nodes of the gating policy, which then owns update/head/block scaling.
    #[allow(clippy::too_many_arguments)]
    fn block_graph(
        &self,
        tape: &mut Tape,
        nodes: &mut Vec<(usize, Var)>,
        x: Var,
        layer: usize,
        key_active: &[bool],
        head_mask: &[bool],
        block_on: bool,
        gates: Option<&AdavitGates>,
        record_attention: bool,
    ) -> BlockOut {
        let t = tape.value(x).nrows();
        let dh = self.config.head_dim();
        let heads = self.config.num_heads;
        debug_assert_eq!(key_active.len(), t);
        debug_assert!(key_active[0] || gates.is_some(), "class token must stay active");

        if !block_on {
            return BlockOut {
                x,
                attention: Vec::new(),
                class_rows: Vec::new(),
                value_slices: Vec::new(),
            };
        }

        let pname = |s: &str| format!("block{layer}.{s}");
        let g1 = self.shared_param(tape, nodes, &pname("ln1.g"));
        let b1 = self.shared_param(tape, nodes, &pname("ln1.b"));
        let ln1 = tape.layer_norm_rows(x, g1, b1, LN_EPS);

        let wq = self.shared_param(tape, nodes, &pname("attn.wq"));
        let bq = self.shared_param(tape, nodes, &pname("attn.bq"));
        let wk = self.shared_param(tape, nodes, &pname("attn.wk"));
        let bk = self.shared_param(tape, nodes, &pname("attn.bk"));
        let wv = self.shared_param(tape, nodes, &pname("attn.wv"));
        let bv = self.shared_param(tape, nodes, &pname("attn.bv"));
        let q = tape.matmul(ln1, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(ln1, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(ln1, wv);
        let mut v = tape.add_row(v, bv);

        if let Some(g) = gates {
            // soft key/value participation: scale value rows by the patch mask
            v = tape.mul_col(v, g.patch_col);
        }

        let need_key_mask = key_active.iter().any(|a| !a);
        let key_mask_mat = if need_key_mask {
            let mut m = Array2::zeros((t, t));
            for (j, act) in key_active.iter().enumerate() {
                if !act {
                    m.column_mut(j).fill(KEY_MASK);
                }
            }
            Some(m)
        } else {
            None
        };

        let mut head_outputs = Vec::with_capacity(heads);
        let mut attention = Vec::new();
        let mut class_rows = Vec::new();
        let mut value_slices = Vec::new();
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            if gates.is_none() && !head_mask[h] {
                // masked-off head contributes exactly zero
                let zero = tape.constant(Array2::zeros((t, dh)));
                head_outputs.push(zero);
                if record_attention {
                    attention.push(Array2::zeros((t, t)));
                }
                continue;
            }
            let qi = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let ki = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vi = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = tape.transpose(ki);
            let logits = tape.matmul(qi, kt);
            let logits = tape.scale(logits, scale);
            let logits = match &key_mask_mat {
                Some(m) => tape.add_const_mat(logits, m.clone()),
                None => logits,
            };
            let a = tape.softmax_rows(logits);
            if record_attention {
                attention.push(tape.value(a).clone());
                class_rows.push(tape.slice_rows(a, 0, 1));
                value_slices.push(tape.value(vi).clone());
            }
            let mut oi = tape.matmul(a, vi);
            if let Some(g) = gates {
                oi = tape.mul_scalar_var(oi, g.head_scales[h]);
            }
            head_outputs.push(oi);
        }
        let concat = tape.concat_cols(&head_outputs);
        let wo = self.shared_param(tape, nodes, &pname("attn.wo"));
        let mut attn_out = tape.matmul(concat, wo);
        if let Some(g) = gates {
            attn_out = tape.mul_scalar_var(attn_out, g.block_scale);
        }
        let attn_out = gate_update(tape, attn_out, key_active, gates);
        let x2 = tape.add(x, attn_out);

        let g2 = self.shared_param(tape, nodes, &pname("ln2.g"));
        let b2 = self.shared_param(tape, nodes, &pname("ln2.b"));
        let ln2 = tape.layer_norm_rows(x2, g2, b2, LN_EPS);
        let w1 = self.shared_param(tape, nodes, &pname("mlp.w1"));
        let bm1 = self.shared_param(tape, nodes, &pname("mlp.b1"));
        let w2 = self.shared_param(tape, nodes, &pname("mlp.w2"));
        let bm2 = self.shared_param(tape, nodes, &pname("mlp.b2"));
        let hmid = tape.matmul(ln2, w1);
        let hmid = tape.add_row(hmid, bm1);
        let hmid = tape.gelu(hmid);
        let mlp = tape.matmul(hmid, w2);
        let mut mlp = tape.add_row(mlp, bm2);
        if let Some(g) = gates {
            mlp = tape.mul_scalar_var(mlp, g.block_scale);
        }
        let mlp = gate_update(tape, mlp, key_active, gates);
        let x3 = tape.add(x2, mlp);

        BlockOut {
            x: x3,
            attention,
            class_rows,
            value_slices,
        }
    }

    /// Sampling step of the token-sampling policy at an enabled layer.
    fn ats_sample(
        &self,
        tape: &mut Tape,
        out: &BlockOut,
        layer: usize,
        active: &mut [bool],
        graph: &mut Vec<AtsLayerGraph>,
        trace: &mut LayerTrace,
    ) -> Result<bool> {
        let params = self.config.policy_params.ats()?;
        let t = self.config.num_tokens();
        let n_active = active.iter().filter(|a| **a).count();

        // head-averaged significance scores over active non-class tokens
        let candidates: Vec<usize> = (1..t).filter(|j| active[*j]).collect();
        let mut mean_scores = vec![0.0; candidates.len()];
        let mut fallback = false;
        for (h, row_var) in out.class_rows.iter().enumerate() {
            let row = tape.value(*row_var);
            let norms: Vec<f64> = candidates
                .iter()
                .map(|j| {
                    out.value_slices[h]
                        .row(*j)
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let attn: Vec<f64> = candidates.iter().map(|j| row[(0, *j)]).collect();
            let scores = ats::significance_scores(&attn, &norms)?;
            if scores.uniform_fallback {
                fallback = true;
            }
            for (i, s) in scores.scores.iter().enumerate() {
                mean_scores[i] += s / out.class_rows.len() as f64;
            }
        }

        let n_target = (n_active - 1)
            .min(params.max_tokens.saturating_sub(1))
            .max(1);
        let kept_local = ats::inverse_transform_sample(&mean_scores, n_target);
        let kept: Vec<usize> = kept_local.iter().map(|i| candidates[*i]).collect();

        for j in 1..t {
            active[j] = kept.contains(&j);
        }
        let mut sampled = vec![0usize];
        sampled.extend(kept.iter().cloned());
        trace.sampled = Some(sampled);
        graph.push(AtsLayerGraph {
            layer: layer + 1,
            class_rows: out.class_rows.clone(),
            active: trace.active_in.clone(),
            n_active,
        });
        Ok(fallback)
    }
}

struct BlockOut {
    x: Var,
    attention: Vec<Array2<f64>>,
    class_rows: Vec<Var>,
    value_slices: Vec<Array2<f64>>,
}

/// Zero the block update of frozen tokens (or scale it by the soft patch
/// gate) so their embeddings carry through unchanged.
fn gate_update(tape: &mut Tape, update: Var, key_active: &[bool], gates: Option<&AdavitGates>) -> Var {
    if let Some(g) = gates {
        return tape.mul_col(update, g.patch_col);
    }
    if key_active.iter().all(|a| *a) {
        return update;
    }
    let col = Array2::from_shape_fn((key_active.len(), 1), |(i, _)| {
        if key_active[i] {
            1.0
        } else {
            0.0
        }
    });
    let wide = {
        let ncols = tape.value(update).ncols();
        let mut m = Array2::zeros((key_active.len(), ncols));
        for i in 0..key_active.len() {
            m.row_mut(i).fill(col[(i, 0)]);
        }
        m
    };
    tape.mul_const_mat(update, wide)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Halting bookkeeping that runs alongside the layer loop.
struct AvitState {
    enabled: bool,
    scores: Vec<Array2<f64>>,
    h_vars: Vec<Var>,
    cumulative: Vec<f64>,
    halt_layer: Vec<usize>,
}

impl AvitState {
    fn new(config: &ModelConfig) -> Self {
        let k = config.num_tokens() - 1;
        AvitState {
            enabled: config.policy() == PolicyKind::Avit,
            scores: Vec::new(),
            h_vars: Vec::new(),
            cumulative: vec![0.0; k],
            halt_layer: vec![0; k],
        }
    }

    /// Compute halting scores from the block output, update activity.
    /// A token participates in the layer that halts it; its score at that
    /// layer is the one that pushed the cumulative sum over the threshold.
    fn observe(&mut self, model: &VitModel, tape: &mut Tape, x: Var, active: &mut [bool], layer: usize) {
        if !self.enabled {
            return;
        }
        let params = model.config.policy_params.avit().expect("avit params");
        let t = model.config.num_tokens();
        let k = t - 1;
        let non_class = tape.slice_rows(x, 1, t);
        let col0 = tape.slice_cols(non_class, 0, 1);
        let gained = tape.scale(col0, params.gate_gain);
        let shifted = tape.add_scalar(gained, params.gate_bias);
        let h = tape.sigmoid(shifted);
        // structurally zero the scores of already-dropped tokens
        let mask = Array2::from_shape_fn((k, 1), |(i, _)| if active[i + 1] { 1.0 } else { 0.0 });
        let h = tape.mul_const_mat(h, mask);
        self.h_vars.push(h);
        self.scores.push(tape.value(h).clone());

        let threshold = 1.0 - params.epsilon;
        let is_last = layer + 1 == model.config.num_layers;
        for i in 0..k {
            if !active[i + 1] {
                continue;
            }
            self.cumulative[i] += self.scores[layer][(i, 0)];
            if self.cumulative[i] >= threshold {
                self.halt_layer[i] = layer + 1;
                active[i + 1] = false;
            } else if is_last {
                self.halt_layer[i] = model.config.num_layers;
            }
        }
    }

    fn finish(self, config: &ModelConfig) -> (AvitGraph, HaltingRecord) {
        let k = config.num_tokens() - 1;
        let l = config.num_layers;
        let mut scores = Array2::zeros((k, l));
        for (layer, col) in self.scores.iter().enumerate() {
            for i in 0..k {
                scores[(i, layer)] = col[(i, 0)];
            }
        }
        let remainder: Vec<f64> = (0..k)
            .map(|i| {
                let n = self.halt_layer[i];
                1.0 - (0..n.saturating_sub(1)).map(|j| scores[(i, j)]).sum::<f64>()
            })
            .collect();
        (
            AvitGraph { h_layers: self.h_vars },
            HaltingRecord {
                scores,
                halt_layer: self.halt_layer,
                remainder,
            },
        )
    }
}

/// Gate nodes decided ahead of each block by the gating policy.
pub(crate) struct AdavitGates {
    patch_col: Var,
    head_scales: Vec<Var>,
    block_scale: Var,
    key_active: Vec<bool>,
    n_active: usize,
    heads_active: usize,
    block_on: bool,
}

struct AdavitState {
    enabled: bool,
    patch_vars: Vec<Var>,
    head_vars: Vec<Var>,
    block_vars: Vec<Var>,
}

impl AdavitState {
    fn new(config: &ModelConfig) -> Self {
        AdavitState {
            enabled: config.policy() == PolicyKind::Adavit,
            patch_vars: Vec::new(),
            head_vars: Vec::new(),
            block_vars: Vec::new(),
        }
    }

    fn decide(
        &mut self,
        model: &VitModel,
        tape: &mut Tape,
        param_nodes: &mut Vec<(usize, Var)>,
        x: Var,
        layer: usize,
        opts: &ForwardOptions,
    ) -> AdavitGates {
        assert!(self.enabled);
        let params = model.config.policy_params.adavit().expect("adavit params");
        let t = model.config.num_tokens();
        let heads = model.config.num_heads;

        let z_cls = tape.slice_rows(x, 0, 1);
        let z_patch = tape.slice_rows(x, 1, t);
        let wp = model.shared_param(tape, param_nodes, &format!("block{layer}.gate.wp"));
        let wh = model.shared_param(tape, param_nodes, &format!("block{layer}.gate.wh"));
        let wb = model.shared_param(tape, param_nodes, &format!("block{layer}.gate.wb"));
        let m_p = tape.matmul(z_patch, wp); // [K,1]
        let m_h = tape.matmul(z_cls, wh); // [1,H]
        let m_b = tape.matmul(z_cls, wb); // [1,1]

        let mut rng = rng::substream(opts.gumbel_seed, "gumbel", layer as u64);
        let mut noise = |rows: usize, cols: usize| -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| {
                let g1 = gumbel_sample(&mut rng);
                let g0 = gumbel_sample(&mut rng);
                g1 - g0
            })
        };
        let noise_p = noise(t - 1, 1);
        let noise_h = noise(1, heads);
        let noise_b = noise(1, 1);

        let temp = params.gumbel_temperature;
        let gumbel_sigmoid = |tape: &mut Tape, m: Var, n: Array2<f64>| -> Var {
            let noisy = tape.add_const_mat(m, n);
            let scaled = tape.scale(noisy, 1.0 / temp);
            tape.sigmoid(scaled)
        };

        let soft_p = gumbel_sigmoid(tape, m_p, noise_p);
        let soft_h = gumbel_sigmoid(tape, m_h, noise_h);
        let soft_b = gumbel_sigmoid(tape, m_b, noise_b);

        let (mask_p, mask_h, mask_b) = match opts.mode {
            MaskMode::Soft => (soft_p, soft_h, soft_b),
            MaskMode::Hard => (
                tape.ste_threshold(soft_p),
                tape.ste_threshold(soft_h),
                tape.ste_threshold(soft_b),
            ),
        };
        self.patch_vars.push(mask_p);
        self.head_vars.push(mask_h);
        self.block_vars.push(mask_b);

        let one = tape.constant(Array2::ones((1, 1)));
        let patch_col = tape.concat_rows(&[one, mask_p]);
        let head_scales: Vec<Var> = (0..heads).map(|h| tape.slice_cols(mask_h, h, h + 1)).collect();
        let block_scale = mask_b;

        // hard mode: dropped tokens are also excluded as keys exactly
        let (key_active, n_active, heads_active, block_on) = match opts.mode {
            MaskMode::Hard => {
                let pv = tape.value(mask_p);
                let mut key_active = vec![true; t];
                for i in 0..t - 1 {
                    key_active[i + 1] = pv[(i, 0)] > 0.5;
                }
                let n_active = key_active.iter().filter(|a| **a).count();
                let hv = tape.value(mask_h);
                let heads_active = (0..heads).filter(|h| hv[(0, *h)] > 0.5).count();
                let block_on = tape.scalar(mask_b) > 0.5;
                (key_active, n_active, heads_active, block_on)
            }
            MaskMode::Soft => (vec![true; t], t, heads, true),
        };

        AdavitGates {
            patch_col,
            head_scales,
            block_scale,
            key_active,
            n_active,
            heads_active,
            block_on,
        }
    }

    fn finish(self, tape: &Tape, mode: MaskMode) -> (AdavitGraph, KeepMasks) {
        let layers = self.patch_vars.len();
        let k = if layers > 0 { tape.value(self.patch_vars[0]).nrows() } else { 0 };
        let heads = if layers > 0 { tape.value(self.head_vars[0]).ncols() } else { 0 };
        let mut patch = Array2::zeros((k, layers));
        let mut head = Array2::zeros((heads, layers));
        let mut block = vec![0.0; layers];
        for l in 0..layers {
            let pv = tape.value(self.patch_vars[l]);
            for i in 0..k {
                patch[(i, l)] = pv[(i, 0)];
            }
            let hv = tape.value(self.head_vars[l]);
            for h in 0..heads {
                head[(h, l)] = hv[(0, h)];
            }
            block[l] = tape.scalar(self.block_vars[l]);
        }
        (
            AdavitGraph {
                patch: self.patch_vars,
                head: self.head_vars,
                block: self.block_vars,
            },
            KeepMasks {
                patch,
                head,
                block,
                hard: mode == MaskMode::Hard,
            },
        )
    }
}

fn gumbel_sample<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
    -(-u.ln()).ln()
}
