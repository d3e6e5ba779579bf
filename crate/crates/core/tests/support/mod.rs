//! Shared test support: the brute-force FLOPs oracle (a reference forward
//! that tallies every scalar multiply it performs) and desk-scale fixtures.

#![allow(dead_code)]

use slowpatch_core::config::ModelConfig;
use slowpatch_core::vit::ComputeTrace;

/// Instrumented matrix multiply: performs the arithmetic with plain nested
/// loops and counts one multiply per scalar product term.
pub struct MulCounter {
    pub multiplies: u64,
}

impl MulCounter {
    pub fn new() -> Self {
        MulCounter { multiplies: 0 }
    }

    pub fn matmul(&mut self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (m, k) = (a.len(), a[0].len());
        let n = b[0].len();
        assert_eq!(b.len(), k);
        let mut c = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[i][t] * b[t][j];
                    self.multiplies += 1;
                }
                c[i][j] = acc;
            }
        }
        c
    }
}

fn dummy(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|r| (0..cols).map(|c| ((r * 31 + c * 17) % 7) as f64 * 0.25 + 0.1).collect())
        .collect()
}

/// Per-layer mask state fed to the oracle.
#[derive(Debug, Clone, Copy)]
pub struct OracleLayer {
    pub n_active: usize,
    pub heads_active: usize,
    pub block_on: bool,
}

/// Reference forward pass over the masked architecture, counting every
/// scalar multiply it performs. Mirrors the accounting conventions: only
/// active tokens are materialized, only active heads' projections run, the
/// attention out-projection is always full width, the scale factor is folded
/// into the query projection, and normalization/softmax/activation do not
/// multiply. Returns FLOPs (2 per multiply).
pub fn oracle_forward_flops(config: &ModelConfig, layers: &[OracleLayer]) -> u64 {
    assert_eq!(layers.len(), config.num_layers);
    let d = config.embed_dim;
    let dh = config.head_dim();
    let hidden = config.mlp_hidden();
    let num_patches = config.num_tokens() - 1;
    let mut counter = MulCounter::new();

    // embedding: patch projection
    let patches = dummy(num_patches, config.patch_dim());
    let w_embed = dummy(config.patch_dim(), d);
    let _tokens = counter.matmul(&patches, &w_embed);

    for layer in layers {
        if !layer.block_on || layer.n_active == 0 {
            continue;
        }
        let n = layer.n_active;
        let x = dummy(n, d);
        // q/k/v for each active head's subspace
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..layer.heads_active {
            let wq = dummy(d, dh);
            let wk = dummy(d, dh);
            let wv = dummy(d, dh);
            let q = counter.matmul(&x, &wq);
            let k = counter.matmul(&x, &wk);
            let v = counter.matmul(&x, &wv);
            let kt: Vec<Vec<f64>> = (0..dh).map(|j| (0..n).map(|i| k[i][j]).collect()).collect();
            let logits = counter.matmul(&q, &kt);
            // row softmax: no multiplies by convention
            let a: Vec<Vec<f64>> = logits
                .iter()
                .map(|row| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let o = counter.matmul(&a, &v);
            for i in 0..n {
                for j in 0..dh {
                    concat[i][h * dh + j] = o[i][j];
                }
            }
        }
        // out projection always runs at full width
        let wo = dummy(d, d);
        let _attn = counter.matmul(&concat, &wo);
        // mlp
        let w1 = dummy(d, hidden);
        let w2 = dummy(hidden, d);
        let mid = counter.matmul(&x, &w1);
        let _out = counter.matmul(&mid, &w2);
    }

    // classifier head on the class token
    let cls = dummy(1, d);
    let w_head = dummy(d, config.num_classes);
    let _logits = counter.matmul(&cls, &w_head);

    2 * counter.multiplies
}

/// Oracle layers for a recorded trace.
pub fn oracle_layers_from_trace(trace: &ComputeTrace) -> Vec<OracleLayer> {
    trace
        .layers
        .iter()
        .map(|l| OracleLayer {
            n_active: l.n_active,
            heads_active: l.heads_active,
            block_on: l.block_on,
        })
        .collect()
}
