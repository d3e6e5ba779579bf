//! Behavioral tests of the transformer substrate: embedding geometry, block
//! identity and masking semantics, halting/sampling/gating dynamics, and
//! forward determinism.

mod support;

use ndarray::Array2;
use slowpatch_core::config::{AtsParams, HaltingParams, ModelConfig, PolicyParams};
use slowpatch_core::vit::{ForwardOptions, MaskMode, TokenState, VitModel};
use slowpatch_core::{Error, Patch};

fn rand_pixels(image_size: usize, seed: u64) -> Array2<f64> {
    use rand::Rng;
    let mut rng = slowpatch_core::rng::substream(seed, "test-pixels", 0);
    Array2::from_shape_fn((image_size * image_size, 3), |_| {
        rng.gen_range(0.0f64..=255.0).round()
    })
}

fn rand_state(tokens: usize, dim: usize, seed: u64) -> TokenState {
    use rand::Rng;
    let mut rng = slowpatch_core::rng::substream(seed, "test-state", 0);
    TokenState {
        embeddings: Array2::from_shape_fn((tokens, dim), |_| rng.gen_range(-1.0..1.0)),
        active: vec![true; tokens],
    }
}

#[test]
fn patch_embed_token_counts() {
    // 32x32 / patch 8 -> 17 tokens
    let m = VitModel::init(ModelConfig::desk_scale(PolicyParams::None), 0).unwrap();
    let state = m.patch_embed(&rand_pixels(32, 1)).unwrap();
    assert_eq!(state.embeddings.nrows(), 17);
    assert_eq!(state.num_active(), 17);

    // 224x224 / patch 16 -> 197 tokens
    let cfg = ModelConfig {
        image_size: 224,
        patch_size: 16,
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 1,
        num_classes: 10,
        policy_params: PolicyParams::None,
        pixel_mean: [0.5; 3],
        pixel_std: [0.25; 3],
    };
    let m = VitModel::init(cfg, 0).unwrap();
    let state = m.patch_embed(&rand_pixels(224, 2)).unwrap();
    assert_eq!(state.embeddings.nrows(), 197);

    // 16x16 / patch 16 -> 2 tokens
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 16,
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 1,
        num_classes: 4,
        policy_params: PolicyParams::None,
        pixel_mean: [0.5; 3],
        pixel_std: [0.25; 3],
    };
    let m = VitModel::init(cfg, 0).unwrap();
    let state = m.patch_embed(&rand_pixels(16, 3)).unwrap();
    assert_eq!(state.embeddings.nrows(), 2);
}

#[test]
fn patch_embed_rejects_dimension_mismatch() {
    let m = VitModel::init(ModelConfig::desk_scale(PolicyParams::None), 0).unwrap();
    let err = m.patch_embed(&rand_pixels(16, 1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn block_off_is_identity() {
    let m = VitModel::init(ModelConfig::tiny(PolicyParams::None), 4).unwrap();
    let state = rand_state(5, 16, 5);
    let (out, trace) = m.block_forward(&state, 0, &[true, true], false).unwrap();
    assert_eq!(out.embeddings, state.embeddings);
    assert!(!trace.block_on);
}

#[test]
fn all_heads_masked_removes_attention_entirely() {
    // with every head off, the block output must not depend on the
    // attention weights at all
    let cfg = ModelConfig::tiny(PolicyParams::None);
    let m1 = VitModel::init(cfg.clone(), 4).unwrap();
    let mut m2 = VitModel::init(cfg, 4).unwrap();
    for name in ["block0.attn.wq", "block0.attn.wk", "block0.attn.wv", "block0.attn.wo"] {
        let idx = m2.param_index(name).unwrap();
        m2.param_mut(idx).mapv_inplace(|v| v * -3.7 + 0.13);
    }
    let state = rand_state(5, 16, 6);
    let (out1, _) = m1.block_forward(&state, 0, &[false, false], true).unwrap();
    let (out2, _) = m2.block_forward(&state, 0, &[false, false], true).unwrap();
    assert_eq!(out1.embeddings, out2.embeddings);

    let (with_attn, _) = m1.block_forward(&state, 0, &[true, true], true).unwrap();
    assert_ne!(out1.embeddings, with_attn.embeddings);
}

#[test]
fn single_active_token_attends_only_to_itself() {
    let m = VitModel::init(ModelConfig::tiny(PolicyParams::None), 7).unwrap();
    let mut state = rand_state(5, 16, 8);
    for a in state.active.iter_mut().skip(1) {
        *a = false;
    }
    let (_, trace) = m.block_forward(&state, 0, &[true, true], true).unwrap();
    for head in &trace.attention {
        assert_eq!(head[(0, 0)], 1.0);
        for j in 1..5 {
            assert_eq!(head[(0, j)], 0.0);
        }
    }
}

#[test]
fn masking_matches_physical_removal_bit_for_bit() {
    let m = VitModel::init(ModelConfig::tiny(PolicyParams::None), 9).unwrap();
    let full = rand_state(5, 16, 10);

    for dropped in 1..5usize {
        let mut masked = full.clone();
        masked.active[dropped] = false;
        let (out_masked, _) = m.block_forward(&masked, 0, &[true, true], true).unwrap();

        let keep: Vec<usize> = (0..5).filter(|i| *i != dropped).collect();
        let removed = TokenState {
            embeddings: ndarray::stack(
                ndarray::Axis(0),
                &keep.iter().map(|i| full.embeddings.row(*i)).collect::<Vec<_>>(),
            )
            .unwrap(),
            active: vec![true; 4],
        };
        let (out_removed, _) = m.block_forward(&removed, 0, &[true, true], true).unwrap();

        for (new_i, old_i) in keep.iter().enumerate() {
            let a = out_masked.embeddings.row(*old_i);
            let b = out_removed.embeddings.row(new_i);
            assert_eq!(a, b, "token {old_i} differs with token {dropped} masked");
        }
        // the frozen token carries through unchanged
        assert_eq!(out_masked.embeddings.row(dropped), full.embeddings.row(dropped));
    }
}

#[test]
fn non_class_tokens_are_permutation_equivariant() {
    let m = VitModel::init(ModelConfig::tiny(PolicyParams::None), 11).unwrap();
    let state = rand_state(5, 16, 12);
    let perm = [0usize, 3, 1, 4, 2]; // fixes the class slot

    let permuted = TokenState {
        embeddings: ndarray::stack(
            ndarray::Axis(0),
            &perm.iter().map(|i| state.embeddings.row(*i)).collect::<Vec<_>>(),
        )
        .unwrap(),
        active: vec![true; 5],
    };

    let mut out = state.clone();
    let mut out_p = permuted;
    for layer in 0..2 {
        out = m.block_forward(&out, layer, &[true, true], true).unwrap().0;
        out_p = m.block_forward(&out_p, layer, &[true, true], true).unwrap().0;
    }
    for (new_i, old_i) in perm.iter().enumerate() {
        let a = out.embeddings.row(*old_i);
        let b = out_p.embeddings.row(new_i);
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "row {old_i} moved by {diff}");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::desk_scale(PolicyParams::Avit(HaltingParams::defaults_for(4)));
    let m = VitModel::init(cfg, 13).unwrap();
    let pixels = rand_pixels(32, 14);
    let patch = Patch::init(8, (0, 0), 32, 15).unwrap();
    let opts = ForwardOptions::evaluation(17);
    let a = m.forward(&pixels, Some(&patch), &opts).unwrap();
    let b = m.forward(&pixels, Some(&patch), &opts).unwrap();
    assert_eq!(a.trace.logits, b.trace.logits);
    assert_eq!(a.trace.retained_per_layer(), b.trace.retained_per_layer());
    for (x, y) in a.trace.layers.iter().zip(b.trace.layers.iter()) {
        assert_eq!(x.attention, y.attention);
    }
}

#[test]
fn policy_none_keeps_every_token() {
    let m = VitModel::init(ModelConfig::desk_scale(PolicyParams::None), 18).unwrap();
    let fp = m.forward(&rand_pixels(32, 19), None, &ForwardOptions::evaluation(0)).unwrap();
    assert_eq!(fp.trace.retained_per_layer(), vec![17; 4]);
}

#[test]
fn unreachable_halting_threshold_drops_nothing() {
    let mut halting = HaltingParams::defaults_for(4);
    halting.gate_bias = -30.0; // h ~ 1e-13 per layer, cumulative far below 1-eps
    let cfg = ModelConfig::desk_scale(PolicyParams::Avit(halting));
    let m = VitModel::init(cfg, 20).unwrap();
    let fp = m.forward(&rand_pixels(32, 21), None, &ForwardOptions::evaluation(0)).unwrap();
    assert_eq!(fp.trace.retained_per_layer(), vec![17; 4]);
    let rec = fp.trace.halting.unwrap();
    assert!(rec.halt_layer.iter().all(|n| *n == 4));
}

#[test]
fn saturated_halting_gate_drops_after_first_layer() {
    let mut halting = HaltingParams::defaults_for(4);
    halting.gate_bias = 30.0; // h ~ 1 at every layer
    let cfg = ModelConfig::desk_scale(PolicyParams::Avit(halting));
    let m = VitModel::init(cfg, 22).unwrap();
    let fp = m.forward(&rand_pixels(32, 23), None, &ForwardOptions::evaluation(0)).unwrap();
    // every non-class token halts at layer 1; later layers run on the class token
    assert_eq!(fp.trace.retained_per_layer(), vec![17, 1, 1, 1]);
    let rec = fp.trace.halting.unwrap();
    assert!(rec.halt_layer.iter().all(|n| *n == 1));
    assert!(rec.remainder.iter().all(|r| (*r - 1.0).abs() < 1e-12));
}

#[test]
fn retained_counts_never_increase_for_halting_and_sampling() {
    for seed in 0..5u64 {
        let mut halting = HaltingParams::defaults_for(4);
        halting.gate_bias = -1.0; // mid-range scores: some tokens halt mid-stack
        let cfg = ModelConfig::desk_scale(PolicyParams::Avit(halting));
        let m = VitModel::init(cfg, seed).unwrap();
        let fp = m.forward(&rand_pixels(32, seed + 100), None, &ForwardOptions::evaluation(0)).unwrap();
        let counts = fp.trace.retained_per_layer();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    }

    let ats = AtsParams {
        ats_layers: vec![2, 3],
        max_tokens: 17,
        layer_loss_weights: vec![1.0, 0.2],
    };
    let cfg = ModelConfig::desk_scale(PolicyParams::Ats(ats));
    let m = VitModel::init(cfg, 31).unwrap();
    let fp = m.forward(&rand_pixels(32, 32), None, &ForwardOptions::evaluation(0)).unwrap();
    let counts = fp.trace.retained_per_layer();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    // class token is always in the sampled set
    for layer in &fp.trace.layers {
        if let Some(s) = &layer.sampled {
            assert!(s.contains(&0));
        }
    }
}

#[test]
fn attention_rows_of_active_tokens_are_stochastic() {
    let mut halting = HaltingParams::defaults_for(4);
    halting.gate_bias = -1.0;
    let cfg = ModelConfig::desk_scale(PolicyParams::Avit(halting));
    let m = VitModel::init(cfg, 33).unwrap();
    let fp = m.forward(&rand_pixels(32, 34), None, &ForwardOptions::evaluation(0)).unwrap();
    for layer in &fp.trace.layers {
        for head in &layer.attention {
            for (i, active) in layer.active_in.iter().enumerate() {
                if !active {
                    continue;
                }
                let row_sum: f64 = head.row(i).sum();
                assert!((row_sum - 1.0).abs() < 1e-5, "row {i} sums to {row_sum}");
                // inactive keys carry exactly zero weight
                for (j, aj) in layer.active_in.iter().enumerate() {
                    if !aj {
                        assert_eq!(head[(i, j)], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn adavit_hard_mode_masks_are_binary_and_recorded() {
    let cfg = ModelConfig::desk_scale(PolicyParams::Adavit(
        slowpatch_core::config::AdavitParams::defaults(),
    ));
    let m = VitModel::init(cfg, 35).unwrap();
    let fp = m.forward(&rand_pixels(32, 36), None, &ForwardOptions::evaluation(37)).unwrap();
    let masks = fp.trace.keep_masks.unwrap();
    assert!(masks.hard);
    assert!(masks.patch.iter().all(|v| *v == 0.0 || *v == 1.0));
    assert!(masks.head.iter().all(|v| *v == 0.0 || *v == 1.0));
    assert!(masks.block.iter().all(|v| *v == 0.0 || *v == 1.0));
    // trace counts match the masks
    for (l, layer) in fp.trace.layers.iter().enumerate() {
        let kept = 1 + (0..16).filter(|k| masks.patch[(*k, l)] == 1.0).count();
        assert_eq!(layer.n_active, kept);
        let heads = (0..4).filter(|h| masks.head[(*h, l)] == 1.0).count();
        assert_eq!(layer.heads_active, heads);
        assert_eq!(layer.block_on, masks.block[l] == 1.0);
    }
}

#[test]
fn adavit_soft_mode_masks_are_continuous() {
    let cfg = ModelConfig::desk_scale(PolicyParams::Adavit(
        slowpatch_core::config::AdavitParams::defaults(),
    ));
    let m = VitModel::init(cfg, 38).unwrap();
    let fp = m.forward(&rand_pixels(32, 39), None, &ForwardOptions::training(40)).unwrap();
    assert_eq!(fp.trace.mask_mode, MaskMode::Soft);
    let masks = fp.trace.keep_masks.unwrap();
    assert!(!masks.hard);
    assert!(masks.patch.iter().any(|v| *v != 0.0 && *v != 1.0));
}

#[test]
fn gumbel_seed_changes_gating_but_is_reproducible() {
    let cfg = ModelConfig::desk_scale(PolicyParams::Adavit(
        slowpatch_core::config::AdavitParams::defaults(),
    ));
    let m = VitModel::init(cfg, 41).unwrap();
    let pixels = rand_pixels(32, 42);
    let a = m.forward(&pixels, None, &ForwardOptions::evaluation(1)).unwrap();
    let b = m.forward(&pixels, None, &ForwardOptions::evaluation(1)).unwrap();
    let c = m.forward(&pixels, None, &ForwardOptions::evaluation(2)).unwrap();
    assert_eq!(
        a.trace.keep_masks.as_ref().unwrap().patch,
        b.trace.keep_masks.as_ref().unwrap().patch
    );
    let differs = a.trace.keep_masks.unwrap().patch != c.trace.keep_masks.unwrap().patch;
    assert!(differs, "different gumbel seeds should flip at least one mask");
}
