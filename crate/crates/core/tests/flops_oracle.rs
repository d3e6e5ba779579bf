//! Ledger-vs-oracle equality: the analytic FLOPs accounting must agree
//! exactly with a brute-force counter that tallies every scalar multiply of
//! a reference forward, over a grid of architectures and random masks, and
//! over traces of real adaptive forwards.

mod support;

use ndarray::Array2;
use rand::Rng;
use slowpatch_core::config::{AdavitParams, AtsParams, HaltingParams, ModelConfig, PolicyParams};
use slowpatch_core::flops::{architectural_max_flops, trace_flops};
use slowpatch_core::vit::{ComputeTrace, ForwardOptions, LayerTrace, MaskMode, VitModel};
use slowpatch_core::PolicyKind;
use support::{oracle_forward_flops, oracle_layers_from_trace, OracleLayer};

fn grid_config(layers: usize, dim: usize, tokens: usize) -> ModelConfig {
    // tokens = 1 + grid^2 must hold; choose patch geometry accordingly
    let grid = ((tokens - 1) as f64).sqrt() as usize;
    assert_eq!(1 + grid * grid, tokens);
    ModelConfig {
        image_size: 8 * grid.max(1),
        patch_size: 8,
        embed_dim: dim,
        num_layers: layers,
        num_heads: 4.min(dim),
        mlp_ratio: 2,
        num_classes: 10,
        policy_params: PolicyParams::None,
        pixel_mean: [0.5; 3],
        pixel_std: [0.25; 3],
    }
}

fn synthetic_trace(config: &ModelConfig, layers: Vec<OracleLayer>) -> ComputeTrace {
    ComputeTrace {
        policy: PolicyKind::None,
        mask_mode: MaskMode::Hard,
        layers: layers
            .iter()
            .map(|l| LayerTrace {
                active_in: (0..config.num_tokens()).map(|i| i < l.n_active).collect(),
                n_active: l.n_active,
                heads_active: l.heads_active,
                block_on: l.block_on,
                attention: vec![],
                sampled: None,
                ats_uniform_fallback: false,
            })
            .collect(),
        logits: vec![0.0; config.num_classes],
        halting: None,
        keep_masks: None,
    }
}

#[test]
fn ledger_equals_oracle_on_grid_with_random_masks() {
    let mut rng = slowpatch_core::rng::substream(0, "flops-grid", 0);
    for layers in [1usize, 2, 4] {
        for dim in [8usize, 16, 32] {
            for tokens in [2usize, 5, 17] {
                let config = grid_config(layers, dim, tokens);
                for draw in 0..5 {
                    let mask_layers: Vec<OracleLayer> = (0..layers)
                        .map(|_| OracleLayer {
                            n_active: rng.gen_range(1..=tokens),
                            heads_active: rng.gen_range(0..=config.num_heads),
                            block_on: rng.gen_bool(0.8),
                        })
                        .collect();
                    let trace = synthetic_trace(&config, mask_layers.clone());
                    let ledger = trace_flops(&trace, &config).unwrap();
                    let oracle = oracle_forward_flops(&config, &mask_layers);
                    assert_eq!(
                        ledger.total, oracle,
                        "mismatch: layers={layers} dim={dim} tokens={tokens} draw={draw} masks={mask_layers:?}"
                    );
                    assert_eq!(ledger.total, ledger.breakdown.total());
                    assert_eq!(
                        ledger.per_layer.iter().sum::<u64>()
                            + ledger.breakdown.embed
                            + ledger.breakdown.head,
                        ledger.total
                    );
                }
            }
        }
    }
}

#[test]
fn ledger_equals_oracle_on_real_adaptive_traces() {
    let mut pixels_rng = slowpatch_core::rng::substream(1, "flops-real", 0);
    let mut pixels = |size: usize| {
        Array2::from_shape_fn((size * size, 3), |_| pixels_rng.gen_range(0.0f64..=255.0))
    };

    // halting with mid-range scores
    let mut halting = HaltingParams::defaults_for(4);
    halting.gate_bias = -1.0;
    let cfg = ModelConfig::desk_scale(PolicyParams::Avit(halting));
    let m = VitModel::init(cfg.clone(), 1).unwrap();
    let fp = m.forward(&pixels(32), None, &ForwardOptions::evaluation(0)).unwrap();
    let ledger = trace_flops(&fp.trace, &cfg).unwrap();
    let oracle = oracle_forward_flops(&cfg, &oracle_layers_from_trace(&fp.trace));
    assert_eq!(ledger.total, oracle);

    // sampling
    let ats = AtsParams {
        ats_layers: vec![2, 3],
        max_tokens: 17,
        layer_loss_weights: vec![1.0, 0.2],
    };
    let cfg = ModelConfig::desk_scale(PolicyParams::Ats(ats));
    let m = VitModel::init(cfg.clone(), 2).unwrap();
    let fp = m.forward(&pixels(32), None, &ForwardOptions::evaluation(0)).unwrap();
    let ledger = trace_flops(&fp.trace, &cfg).unwrap();
    let oracle = oracle_forward_flops(&cfg, &oracle_layers_from_trace(&fp.trace));
    assert_eq!(ledger.total, oracle);

    // gating, hard mode
    let cfg = ModelConfig::desk_scale(PolicyParams::Adavit(AdavitParams::defaults()));
    let m = VitModel::init(cfg.clone(), 3).unwrap();
    for seed in 0..5 {
        let fp = m.forward(&pixels(32), None, &ForwardOptions::evaluation(seed)).unwrap();
        let ledger = trace_flops(&fp.trace, &cfg).unwrap();
        let oracle = oracle_forward_flops(&cfg, &oracle_layers_from_trace(&fp.trace));
        assert_eq!(ledger.total, oracle);
    }
}

#[test]
fn full_token_drop_collapses_to_class_token_cost() {
    let config = grid_config(4, 16, 17);
    let layers = vec![
        OracleLayer { n_active: 17, heads_active: 4, block_on: true },
        OracleLayer { n_active: 1, heads_active: 4, block_on: true },
        OracleLayer { n_active: 1, heads_active: 4, block_on: true },
        OracleLayer { n_active: 1, heads_active: 4, block_on: true },
    ];
    let trace = synthetic_trace(&config, layers.clone());
    let ledger = trace_flops(&trace, &config).unwrap();
    assert_eq!(ledger.per_layer[1], ledger.per_layer[2]);
    assert_eq!(ledger.total, oracle_forward_flops(&config, &layers));
}

#[test]
fn all_blocks_off_leaves_embed_and_head_only() {
    let config = grid_config(2, 16, 5);
    let layers = vec![
        OracleLayer { n_active: 5, heads_active: 4, block_on: false },
        OracleLayer { n_active: 5, heads_active: 4, block_on: false },
    ];
    let trace = synthetic_trace(&config, layers.clone());
    let ledger = trace_flops(&trace, &config).unwrap();
    assert_eq!(ledger.total, ledger.breakdown.embed + ledger.breakdown.head);
    assert_eq!(ledger.total, oracle_forward_flops(&config, &layers));
}

#[test]
fn static_policy_matches_architectural_max() {
    let config = grid_config(4, 32, 17);
    let m = VitModel::init(config.clone(), 9).unwrap();
    let mut rng = slowpatch_core::rng::substream(3, "flops-max", 0);
    let pixels =
        Array2::from_shape_fn((32 * 32, 3), |_| rng.gen_range(0.0f64..=255.0));
    let fp = m.forward(&pixels, None, &ForwardOptions::evaluation(0)).unwrap();
    let ledger = trace_flops(&fp.trace, &config).unwrap();
    assert_eq!(ledger.total, architectural_max_flops(&config));
    assert_eq!(
        ledger.total,
        oracle_forward_flops(&config, &oracle_layers_from_trace(&fp.trace))
    );
}

#[test]
fn soft_gating_traces_are_rejected() {
    let cfg = ModelConfig::desk_scale(PolicyParams::Adavit(AdavitParams::defaults()));
    let m = VitModel::init(cfg.clone(), 4).unwrap();
    let mut rng = slowpatch_core::rng::substream(5, "flops-soft", 0);
    let pixels = Array2::from_shape_fn((32 * 32, 3), |_| rng.gen_range(0.0f64..=255.0));
    let fp = m.forward(&pixels, None, &ForwardOptions::training(0)).unwrap();
    assert!(trace_flops(&fp.trace, &cfg).is_err());
}

#[test]
fn trace_config_mismatch_is_a_contract_error() {
    let config = grid_config(2, 16, 5);
    let other = grid_config(4, 16, 5);
    let trace = synthetic_trace(
        &config,
        vec![
            OracleLayer { n_active: 5, heads_active: 4, block_on: true },
            OracleLayer { n_active: 5, heads_active: 4, block_on: true },
        ],
    );
    assert!(trace_flops(&trace, &other).is_err());
}
