//! Full encoder forward against a scalar, loop-by-loop reimplementation.

mod common;

use ino_core::encoder::{Encoder, HeadScope, ModelConfig, ParamStore};
use ino_core::views::MaskPattern;
use ino_core::{Rng, Tape, Tensor};

type Mat = Vec<Vec<f64>>;

fn model() -> ModelConfig {
    ModelConfig {
        patch_size: 2,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 1,
        mlp_ratio: 4,
        proj_layers: 3,
        proj_dim: 8,
        proj_hidden: Some(12),
        pe_base_resolution: 2,
        inference_layer: 1,
    }
}

fn p<'a>(params: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    params.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

/// `x · W + b` with `W` stored `[in × out]`.
fn linear(x: &Mat, params: &ParamStore<f64>, name: &str) -> Mat {
    let w = p(params, &format!("{name}.weight"));
    let b = p(params, &format!("{name}.bias"));
    let outs = b.len();
    x.iter()
        .map(|row| {
            (0..outs)
                .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * outs + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, params: &ParamStore<f64>, name: &str) -> Mat {
    let g = p(params, &format!("{name}.weight"));
    let b = p(params, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-5);
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / var.sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: &Mat) -> Mat {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|r| r.iter().map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh())).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Single-head softmax(Q Kᵀ / sqrt(d)) V over one sequence.
fn attention(x: &Mat, params: &ParamStore<f64>, prefix: &str, d: usize) -> Mat {
    let qkv = linear(x, params, &format!("{prefix}.attn.qkv"));
    let n = x.len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| qkv[i][c] * qkv[j][d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for c in 0..d {
                out[i][c] += e[j] / z * qkv[j][2 * d + c];
            }
        }
    }
    linear(&out, params, &format!("{prefix}.attn.proj"))
}

fn head(x: &Mat, params: &ParamStore<f64>, layers: usize) -> Mat {
    let mut h = x.clone();
    for j in 0..layers {
        h = gelu(&linear(&h, params, &format!("head.mlp.{j}")));
    }
    linear(&h, params, "head.last")
}

struct OracleOut {
    block: Mat,
    logits: Mat,
}

/// One image, optionally with masked patches; the position grid is stored
/// at the token-grid size so no resize happens.
fn oracle(cfg: &ModelConfig, params: &ParamStore<f64>, image: &Tensor<f64>, mask: Option<&[bool]>) -> OracleOut {
    let (ps, d) = (cfg.patch_size, cfg.embed_dim);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (gh, gw) = (h / ps, w / ps);
    let px = image.data();
    let mut patches = Vec::new();
    for ty in 0..gh {
        for tx in 0..gw {
            let mut v = Vec::new();
            for y in 0..ps {
                for x in 0..ps {
                    for c in 0..3 {
                        v.push(px[((ty * ps + y) * w + tx * ps + x) * 3 + c]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let emb = linear(&patches, params, "patch_embed");
    let pe_grid = p(params, "pos_embed.grid");
    let mut tokens = vec![p(params, "cls_token").iter().zip(p(params, "pos_embed.cls")).map(|(a, b)| a + b).collect()];
    for (j, e) in emb.iter().enumerate() {
        let masked = mask.is_some_and(|m| m[j]);
        let src = if masked { p(params, "mask_token") } else { e.as_slice() };
        tokens.push((0..d).map(|c| src[c] + pe_grid[j * d + c]).collect());
    }
    let mut x = tokens;
    for b in 0..cfg.depth {
        let pre = format!("blocks.{b}");
        let a = attention(&layer_norm(&x, params, &format!("{pre}.norm1")), params, &pre, d);
        x = add(&x, &a);
        let m = linear(&layer_norm(&x, params, &format!("{pre}.norm2")), params, &format!("{pre}.mlp.fc1"));
        let m = linear(&gelu(&m), params, &format!("{pre}.mlp.fc2"));
        x = add(&x, &m);
    }
    let logits = head(&layer_norm(&x, params, "norm"), params, cfg.proj_layers);
    OracleOut { block: x, logits }
}

fn setup(seed: u64) -> (Encoder, ParamStore<f64>, Tensor<f64>) {
    let cfg = model();
    let encoder = Encoder::new(cfg).unwrap();
    let mut rng = Rng::new(seed);
    let mut params = encoder.init::<f64>(&rng.substream("init"));
    common::spread(&mut params, 0.3, &mut rng.substream("spread"));
    let image = common::random_image(4, &mut rng);
    (encoder, params, image)
}

fn max_diff(a: &[f64], b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn forward_matches_naive_single_head_oracle() {
    for seed in 0..5 {
        let (encoder, params, image) = setup(seed);
        let tape = Tape::new();
        let bound = encoder.bind(&tape, &params, false).unwrap();
        let seq = encoder.patchify(&tape, &bound, std::slice::from_ref(&image)).unwrap();
        let out = encoder.forward(&tape, &bound, &seq, HeadScope::All).unwrap();
        let want = oracle(encoder.config(), &params, &image, None);

        let cls = tape.value(out.cls_logits);
        let patch = tape.value(out.patch_logits.unwrap());
        let mut logits = cls.data().to_vec();
        logits.extend_from_slice(patch.data());
        assert!(max_diff(&logits, &want.logits) < 1e-5, "seed {seed} logits");
        let block = tape.value(out.features_by_layer[0]);
        assert!(max_diff(block.data(), &want.block) < 1e-5, "seed {seed} block");
    }
}

#[test]
fn masked_forward_matches_oracle() {
    let (encoder, params, image) = setup(11);
    let cells = vec![false, true, true, false];
    let mask = MaskPattern::from_cells((2, 2), cells.clone()).unwrap();
    let tape = Tape::new();
    let bound = encoder.bind(&tape, &params, false).unwrap();
    let seq = encoder.patchify(&tape, &bound, std::slice::from_ref(&image)).unwrap();
    let masked = encoder.apply_mask_tokens(&tape, &bound, &seq, &[mask]).unwrap();
    let out = encoder.forward(&tape, &bound, &masked, HeadScope::All).unwrap();
    let want = oracle(encoder.config(), &params, &image, Some(&cells));
    let mut logits = tape.value(out.cls_logits).data().to_vec();
    logits.extend_from_slice(tape.value(out.patch_logits.unwrap()).data());
    assert!(max_diff(&logits, &want.logits) < 1e-5);
}

#[test]
fn inference_features_are_unit_norm_block_outputs() {
    let (encoder, params, image) = setup(3);
    let grid = encoder.extract_inference_features(&params, &image).unwrap();
    assert_eq!(grid.shape(), &[2, 2, 8]);
    let want = oracle(encoder.config(), &params, &image, None);
    for (j, row) in want.block[1..].iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..8 {
            assert!((grid.data()[j * 8 + c] - row[c] / norm).abs() < 1e-5);
        }
    }
}
