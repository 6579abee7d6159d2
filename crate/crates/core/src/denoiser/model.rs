//! Tiny conditional attention denoiser.
//!
//! The noisy image is split into a 16×16 grid of patch tokens, run through a
//! stack of self-attention blocks and one cross-attention block over the
//! prompt tokens (each followed by a small pointwise feed-forward), and
//! projected back to a per-pixel noise prediction. The feed-forwards matter:
//! without a pointwise nonlinearity the per-token readout is linear and the
//! sampler mushes blobs into sub-threshold averages. The
//! whole forward pass is recorded on a differentiation tape, so any scalar
//! derived from the attention record can be backpropagated to the input
//! latent. Attention maps are recorded from one designated self-attention
//! layer (the middle of the stack) and from the cross-attention layer.

use crate::gridmath::{DiffTensor, Tape};
use crate::rng;
use crate::scenes::{PromptTokens, VOCAB};
use crate::{Error, Result, GRID, GRID_CELLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub d_model: usize,
    pub n_self_layers: usize,
    pub t_max: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { image_size: 32, d_model: 64, n_self_layers: 2, t_max: 50 }
    }
}

impl DenoiserConfig {
    pub fn patch(&self) -> usize {
        self.image_size / GRID
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < GRID || !self.image_size.is_multiple_of(GRID) {
            return Err(Error::Validation(format!(
                "image size {} must be a multiple of the {GRID}-cell grid",
                self.image_size
            )));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(8) {
            return Err(Error::Validation(format!(
                "d_model {} must be a positive multiple of 8",
                self.d_model
            )));
        }
        if self.n_self_layers == 0 {
            return Err(Error::Validation("need at least one self-attention layer".into()));
        }
        if self.t_max < 2 {
            return Err(Error::Validation(format!("t_max {} below 2", self.t_max)));
        }
        Ok(())
    }

    /// Index of the self-attention layer whose maps are recorded.
    pub fn record_layer(&self) -> usize {
        self.n_self_layers / 2
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: std::ops::Range<usize>,
}

/// All learnable arrays in one flat buffer with a named-segment layout; the
/// fixed segment order doubles as the optimizer's parameter order and the
/// checkpoint's array order.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    data: Vec<f32>,
    segments: Vec<Segment>,
}

fn build_segments(config: &DenoiserConfig) -> Vec<Segment> {
    let d = config.d_model;
    let p2 = config.patch() * config.patch();
    let mut segments = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        let range = offset..offset + len;
        offset += len;
        Segment { name, shape, range }
    };
    segments.push(push("patch_embed".into(), vec![p2, d]));
    segments.push(push("pos_embed".into(), vec![GRID_CELLS, d]));
    for layer in 0..config.n_self_layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            segments.push(push(format!("self{layer}.{proj}"), vec![d, d]));
        }
        segments.push(push(format!("self{layer}.w1"), vec![d, 2 * d]));
        segments.push(push(format!("self{layer}.w2"), vec![2 * d, d]));
    }
    for proj in ["wq", "wk", "wv", "wo"] {
        segments.push(push(format!("cross.{proj}"), vec![d, d]));
    }
    segments.push(push("cross.w1".into(), vec![d, 2 * d]));
    segments.push(push("cross.w2".into(), vec![2 * d, d]));
    segments.push(push("token_embed".into(), vec![VOCAB.len(), d]));
    segments.push(push("time_embed".into(), vec![config.t_max, d]));
    segments.push(push("out_proj".into(), vec![d, p2]));
    segments
}

impl DenoiserParams {
    /// Random initialization: N(0, 0.02) for projections, with larger
    /// positional and timestep tables so attention is position- and
    /// time-structured from the first steps.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let segments = build_segments(&config);
        let total = segments.last().map(|s| s.range.end).unwrap_or(0);
        let mut data = vec![0.0f32; total];
        let mut stream = rng::derive(seed, "param-init", 0);
        for seg in &segments {
            let std = match seg.name.as_str() {
                "pos_embed" | "time_embed" | "token_embed" => 0.1,
                _ => 0.02,
            };
            for v in &mut data[seg.range.clone()] {
                *v = rng::normal(&mut stream) * std;
            }
        }
        Ok(DenoiserParams { config, data, segments })
    }

    pub fn from_parts(config: DenoiserConfig, data: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let segments = build_segments(&config);
        let total = segments.last().map(|s| s.range.end).unwrap_or(0);
        if data.len() != total {
            return Err(Error::Validation(format!(
                "parameter buffer has {} values, layout needs {total}",
                data.len()
            )));
        }
        Ok(DenoiserParams { config, data, segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| (&s.shape[..], &self.data[s.range.clone()]))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Register every segment on a tape. Trainable binding makes the segments
    /// differentiable leaves; inference binding records them as constants so
    /// the backward sweep skips the parameter branches.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundParams> {
        let mut tensors = Vec::with_capacity(self.segments.len());
        for seg in &self.segments {
            let values = self.data[seg.range.clone()].to_vec();
            let t = if trainable {
                tape.leaf(values, &seg.shape)?
            } else {
                tape.constant(values, &seg.shape)?
            };
            tensors.push(t);
        }
        Ok(BoundParams { tensors })
    }

    /// Gather the gradient of every segment (zeros where no gradient flowed)
    /// in layout order.
    pub fn collect_grads(&self, tape: &Tape, bound: &BoundParams) -> Vec<f32> {
        let mut grad = vec![0.0f32; self.data.len()];
        for (seg, tensor) in self.segments.iter().zip(&bound.tensors) {
            if let Some(g) = tape.grad(tensor) {
                grad[seg.range.clone()].copy_from_slice(&g);
            }
        }
        grad
    }
}

pub struct BoundParams {
    tensors: Vec<DiffTensor>,
}

impl BoundParams {
    fn get(&self, params: &DenoiserParams, name: &str) -> DiffTensor {
        let idx = params
            .segments
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name}"));
        self.tensors[idx].clone()
    }
}

/// Attention maps captured during one forward pass, kept on the tape.
///
/// `cross` holds one spatial map per prompt token (rows), the transpose of
/// the per-cell attention distributions over tokens. `self_maps` holds, per
/// query cell (row), that cell's attention distribution over all cells.
pub struct AttentionRecord {
    pub cross: DiffTensor,
    pub self_maps: DiffTensor,
}

impl AttentionRecord {
    /// Detached copy of one token's spatial map.
    pub fn cross_map(&self, tape: &Tape, token_index: usize) -> Result<Vec<f32>> {
        let n_tokens = self.cross.shape()[0];
        if token_index >= n_tokens {
            return Err(Error::Validation(format!(
                "token index {token_index} out of range for {n_tokens} tokens"
            )));
        }
        let values = tape.values(&self.cross);
        Ok(values[token_index * GRID_CELLS..(token_index + 1) * GRID_CELLS].to_vec())
    }
}

/// Permutation taking a size×size image to [cells, patch²] token rows.
pub fn patchify_map(size: usize) -> Vec<usize> {
    let p = size / GRID;
    let mut map = Vec::with_capacity(size * size);
    for cell in 0..GRID_CELLS {
        let (gr, gc) = (cell / GRID, cell % GRID);
        for pr in 0..p {
            for pc in 0..p {
                map.push((gr * p + pr) * size + gc * p + pc);
            }
        }
    }
    map
}

/// Inverse permutation: [cells, patch²] rows back to a size×size image.
pub fn unpatchify_map(size: usize) -> Vec<usize> {
    let forward = patchify_map(size);
    let mut inverse = vec![0usize; forward.len()];
    for (token_pos, &pixel_pos) in forward.iter().enumerate() {
        inverse[pixel_pos] = token_pos;
    }
    inverse
}

/// One denoiser forward pass on the tape.
///
/// Returns the noise prediction (same shape as `z`) and the attention record.
/// The record stays on the tape: differentiating any scalar built from it
/// reaches `z` through the attention stack.
pub fn forward(
    tape: &Tape,
    z: &DiffTensor,
    t: usize,
    tokens: &PromptTokens,
    params: &DenoiserParams,
    bound: &BoundParams,
) -> Result<(DiffTensor, AttentionRecord)> {
    let cfg = &params.config;
    let size = cfg.image_size;
    if z.shape() != [size, size] {
        return Err(Error::shape(
            "denoiser forward",
            format!("latent shape {:?}, expected [{size}, {size}]", z.shape()),
        ));
    }
    if t == 0 || t > cfg.t_max {
        return Err(Error::Validation(format!("timestep {t} outside 1..={}", cfg.t_max)));
    }
    tokens.validate()?;

    let d = cfg.d_model;
    let p2 = cfg.patch() * cfg.patch();
    // 1/√d score scaling enters as the softmax temperature; the attention
    // probabilities are identical and one intermediate tensor drops out.
    let sqrt_d = (d as f32).sqrt();

    // Patch tokens + positional and timestep embeddings.
    let patches = tape.gather(z, &patchify_map(size), &[GRID_CELLS, p2])?;
    let mut x = tape.matmul(&patches, &bound.get(params, "patch_embed"))?;
    x = tape.add(&x, &bound.get(params, "pos_embed"))?;
    let t_emb = tape.embed_rows(&bound.get(params, "time_embed"), &[t - 1])?;
    x = tape.add_row(&x, &t_emb)?;

    let mut recorded_self: Option<DiffTensor> = None;
    for layer in 0..cfg.n_self_layers {
        let h = tape.rmsnorm_rows(&x)?;
        let q = tape.matmul(&h, &bound.get(params, &format!("self{layer}.wq")))?;
        let k = tape.matmul(&h, &bound.get(params, &format!("self{layer}.wk")))?;
        let v = tape.matmul(&h, &bound.get(params, &format!("self{layer}.wv")))?;
        let scores = tape.matmul_nt(&q, &k)?;
        let probs = tape.softmax_rows(&scores, sqrt_d)?;
        if layer == cfg.record_layer() {
            recorded_self = Some(probs.clone());
        }
        let attn = tape.matmul(&probs, &v)?;
        let out = tape.matmul(&attn, &bound.get(params, &format!("self{layer}.wo")))?;
        x = tape.add(&x, &out)?;
        x = feed_forward(
            tape,
            &x,
            &bound.get(params, &format!("self{layer}.w1")),
            &bound.get(params, &format!("self{layer}.w2")),
        )?;
    }

    // Cross-attention over the prompt tokens.
    let tok = tape.embed_rows(&bound.get(params, "token_embed"), &tokens.token_ids)?;
    let h = tape.rmsnorm_rows(&x)?;
    let q = tape.matmul(&h, &bound.get(params, "cross.wq"))?;
    let k = tape.matmul(&tok, &bound.get(params, "cross.wk"))?;
    let v = tape.matmul(&tok, &bound.get(params, "cross.wv"))?;
    let scores = tape.matmul_nt(&q, &k)?;
    let probs = tape.softmax_rows(&scores, sqrt_d)?; // [cells, tokens]
    let cross_record = tape.transpose(&probs)?; // [tokens, cells]
    let attn = tape.matmul(&probs, &v)?;
    let out = tape.matmul(&attn, &bound.get(params, "cross.wo"))?;
    x = tape.add(&x, &out)?;
    x = feed_forward(tape, &x, &bound.get(params, "cross.w1"), &bound.get(params, "cross.w2"))?;

    // Noise prediction head. No normalization here: the head must see the
    // residual stream's amplitude to scale its noise estimate.
    let per_patch = tape.matmul(&x, &bound.get(params, "out_proj"))?;
    let eps = tape.gather(&per_patch, &unpatchify_map(size), &[size, size])?;

    let record = AttentionRecord {
        cross: cross_record,
        self_maps: recorded_self.expect("record layer exists by config validation"),
    };
    Ok((eps, record))
}

fn feed_forward(
    tape: &Tape,
    x: &DiffTensor,
    w1: &DiffTensor,
    w2: &DiffTensor,
) -> Result<DiffTensor> {
    let h = tape.rmsnorm_rows(x)?;
    let hidden = tape.relu(&tape.matmul(&h, w1)?)?;
    let out = tape.matmul(&hidden, w2)?;
    tape.add(x, &out)
}

/// Convenience wrapper: fresh constants binding, inference only.
pub fn forward_inference(
    tape: &Tape,
    z_values: Vec<f32>,
    t: usize,
    tokens: &PromptTokens,
    params: &DenoiserParams,
) -> Result<(DiffTensor, AttentionRecord, DiffTensor)> {
    let size = params.config.image_size;
    let z = tape.constant(z_values, &[size, size])?;
    let bound = params.bind(tape, false)?;
    let (eps, record) = forward(tape, &z, t, tokens, params, &bound)?;
    Ok((eps, record, z))
}
