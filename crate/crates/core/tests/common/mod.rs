//! Shared test support: a 64-bit reference implementation of the denoiser
//! forward pass and the dispelling objective.
//!
//! This mirrors the production math in plain f64 arrays with no tape, and is
//! the independent side of the finite-difference gradient checks: central
//! differences of these functions approximate the true derivative far below
//! the test tolerances, while the analytic gradients under test come from the
//! f32 tape.

#![allow(dead_code)]

use intact::denoiser::{patchify_map, unpatchify_map, DenoiserParams};
use intact::dispel::{GridPoint, GuidanceConfig, RegionMask};
use intact::scenes::PromptTokens;
use intact::{GRID, GRID_CELLS};

pub struct RefForward {
    /// Per-token spatial maps, [n_tokens × 256].
    pub cross: Vec<f64>,
    /// Per-query-cell maps, [256 × 256].
    pub self_maps: Vec<f64>,
    /// Noise prediction, [size × size].
    pub eps: Vec<f64>,
}

fn seg(params: &DenoiserParams, name: &str) -> Vec<f64> {
    let (_, values) = params
        .segment(name)
        .unwrap_or_else(|| panic!("missing segment {name}"));
    values.iter().map(|&v| v as f64).collect()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            for j in 0..n {
                out[i * n + j] += aik * b[kk * n + j];
            }
        }
    }
    out
}

fn rmsnorm_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row_idx, row) in x.chunks(cols).enumerate() {
        let ss: f64 = row.iter().map(|&v| v * v).sum();
        let inv = 1.0 / (ss / cols as f64 + 1e-6f32 as f64).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out[row_idx * cols + j] = v * inv;
        }
    }
    out
}

fn feed_forward(x: &[f64], w1: &[f64], w2: &[f64], d: usize) -> Vec<f64> {
    let h = rmsnorm_rows(x, d);
    let mut hidden = matmul(&h, w1, GRID_CELLS, d, 2 * d);
    for v in &mut hidden {
        *v = v.max(0.0);
    }
    let out = matmul(&hidden, w2, GRID_CELLS, 2 * d, d);
    x.iter().zip(&out).map(|(&a, &b)| a + b).collect()
}

fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// f64 mirror of the production forward pass.
pub fn ref_forward(
    z: &[f64],
    t: usize,
    tokens: &PromptTokens,
    params: &DenoiserParams,
) -> RefForward {
    let cfg = &params.config;
    let size = cfg.image_size;
    let d = cfg.d_model;
    let p2 = cfg.patch() * cfg.patch();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let fwd_map = patchify_map(size);
    let mut patches = vec![0.0f64; GRID_CELLS * p2];
    for (slot, &src) in fwd_map.iter().enumerate() {
        patches[slot] = z[src];
    }

    let mut x = matmul(&patches, &seg(params, "patch_embed"), GRID_CELLS, p2, d);
    let pos = seg(params, "pos_embed");
    for (xv, pv) in x.iter_mut().zip(&pos) {
        *xv += pv;
    }
    let time = seg(params, "time_embed");
    for row in 0..GRID_CELLS {
        for j in 0..d {
            x[row * d + j] += time[(t - 1) * d + j];
        }
    }

    let mut recorded_self = Vec::new();
    for layer in 0..cfg.n_self_layers {
        let h = rmsnorm_rows(&x, d);
        let q = matmul(&h, &seg(params, &format!("self{layer}.wq")), GRID_CELLS, d, d);
        let k = matmul(&h, &seg(params, &format!("self{layer}.wk")), GRID_CELLS, d, d);
        let v = matmul(&h, &seg(params, &format!("self{layer}.wv")), GRID_CELLS, d, d);
        let mut scores = vec![0.0f64; GRID_CELLS * GRID_CELLS];
        for i in 0..GRID_CELLS {
            for j in 0..GRID_CELLS {
                let mut acc = 0.0;
                for dd in 0..d {
                    acc += q[i * d + dd] * k[j * d + dd];
                }
                scores[i * GRID_CELLS + j] = acc * inv_sqrt_d;
            }
        }
        softmax_rows(&mut scores, GRID_CELLS);
        if layer == cfg.record_layer() {
            recorded_self = scores.clone();
        }
        let attn = matmul(&scores, &v, GRID_CELLS, GRID_CELLS, d);
        let out = matmul(&attn, &seg(params, &format!("self{layer}.wo")), GRID_CELLS, d, d);
        for (xv, ov) in x.iter_mut().zip(&out) {
            *xv += ov;
        }
        x = feed_forward(
            &x,
            &seg(params, &format!("self{layer}.w1")),
            &seg(params, &format!("self{layer}.w2")),
            d,
        );
    }

    let token_table = seg(params, "token_embed");
    let n_tokens = tokens.token_ids.len();
    let mut tok = vec![0.0f64; n_tokens * d];
    for (slot, &id) in tokens.token_ids.iter().enumerate() {
        tok[slot * d..(slot + 1) * d].copy_from_slice(&token_table[id * d..(id + 1) * d]);
    }
    let h = rmsnorm_rows(&x, d);
    let q = matmul(&h, &seg(params, "cross.wq"), GRID_CELLS, d, d);
    let k = matmul(&tok, &seg(params, "cross.wk"), n_tokens, d, d);
    let v = matmul(&tok, &seg(params, "cross.wv"), n_tokens, d, d);
    let mut scores = vec![0.0f64; GRID_CELLS * n_tokens];
    for i in 0..GRID_CELLS {
        for j in 0..n_tokens {
            let mut acc = 0.0;
            for dd in 0..d {
                acc += q[i * d + dd] * k[j * d + dd];
            }
            scores[i * n_tokens + j] = acc * inv_sqrt_d;
        }
    }
    softmax_rows(&mut scores, n_tokens);
    let mut cross = vec![0.0f64; n_tokens * GRID_CELLS];
    for cell in 0..GRID_CELLS {
        for tk in 0..n_tokens {
            cross[tk * GRID_CELLS + cell] = scores[cell * n_tokens + tk];
        }
    }
    let attn = matmul(&scores, &v, GRID_CELLS, n_tokens, d);
    let out = matmul(&attn, &seg(params, "cross.wo"), GRID_CELLS, d, d);
    for (xv, ov) in x.iter_mut().zip(&out) {
        *xv += ov;
    }
    x = feed_forward(&x, &seg(params, "cross.w1"), &seg(params, "cross.w2"), d);

    let per_patch = matmul(&x, &seg(params, "out_proj"), GRID_CELLS, d, p2);
    let inv_map = unpatchify_map(size);
    let mut eps = vec![0.0f64; size * size];
    for (pixel, &src) in inv_map.iter().enumerate() {
        eps[pixel] = per_patch[src];
    }

    RefForward { cross, self_maps: recorded_self, eps }
}

/// Region weights of the dispelling loss for a mask.
pub fn loss_weights(mask: &RegionMask, alpha: f64, beta: f64) -> Vec<f64> {
    (0..GRID_CELLS)
        .map(|i| {
            if mask.sur[i] {
                alpha / mask.sur_count as f64
            } else if mask.inter[i] {
                -beta / mask.inter_count as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// f64 mirror of the frozen dispelling objective (fixed mask and key points).
pub fn ref_objective(
    z: &[f64],
    t: usize,
    tokens: &PromptTokens,
    params: &DenoiserParams,
    cfg: &GuidanceConfig,
    mask: &RegionMask,
    points: &[Vec<GridPoint>],
) -> f64 {
    let fwd = ref_forward(z, t, tokens, params);
    let w = loss_weights(mask, cfg.alpha as f64, cfg.beta as f64);
    let mut total = 0.0;
    for (slot, &obj) in tokens.object_indices().iter().enumerate() {
        if cfg.ablate.use_cross() {
            let map = &fwd.cross[obj * GRID_CELLS..(obj + 1) * GRID_CELLS];
            total += map.iter().zip(&w).map(|(&m, &wv)| m * wv).sum::<f64>();
        }
        if cfg.ablate.use_self() {
            let pts = &points[slot];
            let inv_k = 1.0 / pts.len() as f64;
            let mut avg = vec![0.0f64; GRID_CELLS];
            for p in pts {
                let row = &fwd.self_maps[p.cell() * GRID_CELLS..(p.cell() + 1) * GRID_CELLS];
                for (a, &v) in avg.iter_mut().zip(row) {
                    *a += v * inv_k;
                }
            }
            total += avg.iter().zip(&w).map(|(&m, &wv)| m * wv).sum::<f64>();
        }
    }
    total
}

/// Sum of one token's cross map over a fixed cell region.
pub fn ref_cross_region_sum(
    z: &[f64],
    t: usize,
    tokens: &PromptTokens,
    params: &DenoiserParams,
    token_index: usize,
    region: &[usize],
) -> f64 {
    let fwd = ref_forward(z, t, tokens, params);
    let map = &fwd.cross[token_index * GRID_CELLS..(token_index + 1) * GRID_CELLS];
    region.iter().map(|&c| map[c]).sum()
}

/// Scale a fresh random initialization so the attention maps are
/// well-conditioned rather than near-uniform.
pub fn scaled_random_params(
    config: intact::denoiser::DenoiserConfig,
    seed: u64,
    scale: f32,
) -> DenoiserParams {
    let base = DenoiserParams::init(config, seed).unwrap();
    let data: Vec<f32> = base.data().iter().map(|&v| v * scale).collect();
    DenoiserParams::from_parts(config, data).unwrap()
}

pub fn grid_region(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<usize> {
    let mut cells = Vec::new();
    for r in rows {
        for c in cols.clone() {
            cells.push(r * GRID + c);
        }
    }
    cells
}
