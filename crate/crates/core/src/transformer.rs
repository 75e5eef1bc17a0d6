//! Seeded toy stand-in for the scale-wise transformer.
//!
//! Each step maps the previous accumulated features (resampled to the step's
//! grid) and the sample's prompt rows to per-token bit logits. Blocks are
//! pre-norm residual: self-attention, cross-attention over prompt rows, then a
//! logistic-gated feed-forward. Self-attention exposes a batch-wide hook that
//! sees every sample's Q/K/V at a given `(step, layer, branch)` before the
//! attention product, which is where cross-sample guidance runs.
//!
//! Weight recipe: every tensor is drawn from its own ChaCha8 stream keyed by
//! `(seed, block, tensor id)`, entries uniform in `±sqrt(3 / fan_in)`; biases
//! are uniform in `±0.1` except the head bias which is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::EmbeddingBlock;
use crate::rng;
use crate::scalewise::{resample_bilinear, FeatureMap, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Channel (bit) count `d` of residual and feature maps.
    pub channels: usize,
    pub text_width: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            channels: 32,
            text_width: 32,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("channels", self.channels),
            ("text_width", self.text_width),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::validation("d_model must be divisible by n_heads"));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::validation(
                "d_model must be a multiple of 4 for the 2-D positional encoding",
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    fn seeded(
        seed: u64,
        block: u64,
        tensor: u64,
        in_dim: usize,
        out_dim: usize,
        bias_scale: f64,
    ) -> Self {
        let mut r = rng::stream("storyscale/weights", &[seed, block, tensor]);
        let weight = rng::uniform_vec(&mut r, in_dim * out_dim, (3.0 / in_dim as f64).sqrt());
        let bias = if bias_scale > 0.0 {
            rng::uniform_vec(&mut r, out_dim, bias_scale)
        } else {
            vec![0.0; out_dim]
        };
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Applies the map to each of `rows.len() / in_dim` rows.
    pub fn apply_rows(&self, rows: &[f64]) -> Vec<f64> {
        rows.chunks_exact(self.in_dim)
            .flat_map(|r| self.apply(r))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub cross_query: Linear,
    pub cross_key: Linear,
    pub cross_value: Linear,
    pub cross_out: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub seed: u64,
    pub dims: ModelDims,
    pub input: Linear,
    pub blocks: Vec<BlockParams>,
    pub head: Linear,
    /// Projection of the mean prompt row to the channel vector of `F_0`.
    pub init_proj: Linear,
}

pub fn init_model(seed: u64, dims: ModelDims) -> Result<ModelParams> {
    dims.validate()?;
    let dm = dims.d_model;
    let ff = 2 * dm;
    let bias = 0.1;
    let blocks = (0..dims.n_blocks as u64)
        .map(|b| {
            let blk = b + 1;
            BlockParams {
                query: Linear::seeded(seed, blk, 0, dm, dm, bias),
                key: Linear::seeded(seed, blk, 1, dm, dm, bias),
                value: Linear::seeded(seed, blk, 2, dm, dm, bias),
                out: Linear::seeded(seed, blk, 3, dm, dm, bias),
                cross_query: Linear::seeded(seed, blk, 4, dm, dm, bias),
                cross_key: Linear::seeded(seed, blk, 5, dims.text_width, dm, bias),
                cross_value: Linear::seeded(seed, blk, 6, dims.text_width, dm, bias),
                cross_out: Linear::seeded(seed, blk, 7, dm, dm, bias),
                ff_in: Linear::seeded(seed, blk, 8, dm, ff, bias),
                ff_out: Linear::seeded(seed, blk, 9, ff, dm, bias),
            }
        })
        .collect();
    Ok(ModelParams {
        seed,
        dims,
        input: Linear::seeded(seed, 0, 0, dims.channels, dm, bias),
        blocks,
        head: Linear::seeded(seed, 0, 1, dm, dims.channels, 0.0),
        init_proj: Linear::seeded(seed, 0, 2, dims.text_width, dims.channels, 0.0),
    })
}

impl ModelParams {
    /// Channel vector of `F_0` for a prompt sequence: the projected mean row
    /// (zeros for an empty sequence).
    pub fn initial_channels(&self, prompt: &EmbeddingBlock) -> Vec<f64> {
        if prompt.token_count() == 0 {
            return vec![0.0; self.dims.channels];
        }
        self.init_proj.apply(&prompt.mean_row())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Per-sample Q/K/V of one self-attention application, laid out
/// `[head][token][d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub branch: Branch,
    pub step: usize,
    pub layer: usize,
    pub sample_index: usize,
    pub n_heads: usize,
    pub tokens: usize,
    pub d_head: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub recorded_alpha: Option<f64>,
}

impl AttentionState {
    /// Splits token-major `tokens × (n_heads·d_head)` projections into heads.
    #[allow(clippy::too_many_arguments)]
    pub fn from_projections(
        branch: Branch,
        step: usize,
        layer: usize,
        sample_index: usize,
        n_heads: usize,
        tokens: usize,
        q: &[f64],
        k: &[f64],
        v: &[f64],
    ) -> Self {
        let d_model = q.len() / tokens;
        let d_head = d_model / n_heads;
        let split = |m: &[f64]| {
            let mut out = Vec::with_capacity(m.len());
            for h in 0..n_heads {
                for t in 0..tokens {
                    let base = t * d_model + h * d_head;
                    out.extend_from_slice(&m[base..base + d_head]);
                }
            }
            out
        };
        Self {
            branch,
            step,
            layer,
            sample_index,
            n_heads,
            tokens,
            d_head,
            q: split(q),
            k: split(k),
            v: split(v),
            recorded_alpha: None,
        }
    }

    pub fn same_shape(&self, other: &AttentionState) -> bool {
        self.n_heads == other.n_heads && self.tokens == other.tokens && self.d_head == other.d_head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookContext {
    pub step: usize,
    pub layer: usize,
    pub branch: Branch,
}

/// Called once per `(step, layer, branch)` with every sample's state, before
/// the attention product. May rewrite K and V in place.
pub trait AttentionHook {
    fn on_self_attention(&mut self, ctx: &HookContext, states: &mut [AttentionState])
        -> Result<()>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn on_self_attention(
        &mut self,
        _ctx: &HookContext,
        _states: &mut [AttentionState],
    ) -> Result<()> {
        Ok(())
    }
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Scaled dot-product attention for one head: `q` is `nq × dh`, `k`/`v` are
/// `nk × dh`. Returns the `nq × dh` output.
pub fn attend_head(q: &[f64], k: &[f64], v: &[f64], dh: usize) -> Vec<f64> {
    let nq = q.len() / dh;
    let nk = k.len() / dh;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * dh];
    let mut weights = vec![0.0; nk];
    for i in 0..nq {
        let qi = &q[i * dh..(i + 1) * dh];
        for (j, w) in weights.iter_mut().enumerate() {
            let kj = &k[j * dh..(j + 1) * dh];
            *w = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut weights);
        let oi = &mut out[i * dh..(i + 1) * dh];
        for (j, w) in weights.iter().enumerate() {
            let vj = &v[j * dh..(j + 1) * dh];
            for (o, x) in oi.iter_mut().zip(vj) {
                *o += w * x;
            }
        }
    }
    out
}

/// Non-causal multi-head attention over the state's tokens. Returns
/// token-major `tokens × (n_heads·d_head)` with heads concatenated; the
/// output projection is left to the caller.
pub fn self_attention(state: &AttentionState) -> Result<Vec<f64>> {
    let per_head = state.tokens * state.d_head;
    let expected = state.n_heads * per_head;
    if state.q.len() != expected || state.k.len() != expected || state.v.len() != expected {
        return Err(Error::shape(
            "attention state Q/K/V do not match declared shape",
        ));
    }
    let d_model = state.n_heads * state.d_head;
    let mut out = vec![0.0; state.tokens * d_model];
    for h in 0..state.n_heads {
        let range = h * per_head..(h + 1) * per_head;
        let o = attend_head(
            &state.q[range.clone()],
            &state.k[range.clone()],
            &state.v[range],
            state.d_head,
        );
        for t in 0..state.tokens {
            out[t * d_model + h * state.d_head..t * d_model + (h + 1) * state.d_head]
                .copy_from_slice(&o[t * state.d_head..(t + 1) * state.d_head]);
        }
    }
    Ok(out)
}

fn rms_norm_rows(x: &[f64], width: usize) -> Vec<f64> {
    x.chunks_exact(width)
        .flat_map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / width as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            row.iter().map(move |v| v * inv)
        })
        .collect()
}

/// Fixed 2-D sinusoidal encoding: the first half of the width encodes the
/// row center `(r + 0.5) / h`, the second half the column center, each as
/// `sin/cos(pi · 2^k · pos)` pairs. Scaled by 0.5.
pub fn positional_encoding(h: usize, w: usize, d_model: usize) -> Vec<f64> {
    let half = d_model / 2;
    let pairs = half / 2;
    let mut out = Vec::with_capacity(h * w * d_model);
    for r in 0..h {
        for c in 0..w {
            for (pos, _) in [
                ((r as f64 + 0.5) / h as f64, 0),
                ((c as f64 + 0.5) / w as f64, 1),
            ] {
                for k in 0..pairs {
                    let angle = std::f64::consts::PI * f64::powi(2.0, k as i32) * pos;
                    out.push(0.5 * angle.sin());
                    out.push(0.5 * angle.cos());
                }
            }
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// One sample's input to a forward step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub prev: &'a FeatureMap,
    /// Prompt rows; empty for the unconditional (null prompt) branch, in
    /// which case cross-attention is skipped.
    pub prompt: &'a EmbeddingBlock,
    pub sample_index: usize,
}

/// Runs one step for a whole batch in lockstep so the hook can see all
/// samples at each self-attention point. Returns per-sample logits of shape
/// `h_s × w_s × channels`.
pub fn forward_batch(
    params: &ModelParams,
    inputs: &[StepInput<'_>],
    step: usize,
    size: (usize, usize),
    branch: Branch,
    hook: &mut dyn AttentionHook,
) -> Result<Vec<Grid>> {
    let dims = params.dims;
    let dm = dims.d_model;
    let (h, w) = size;
    let tokens = h * w;
    if tokens == 0 {
        return Err(Error::validation("step size must be non-empty"));
    }
    let pe = positional_encoding(h, w, dm);

    let mut streams: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    for input in inputs {
        let (_, _, d) = input.prev.grid().dims();
        if d != dims.channels {
            return Err(Error::shape(format!(
                "feature map has {d} channels, model expects {}",
                dims.channels
            )));
        }
        if input.prompt.token_count() > 0 && input.prompt.width() != dims.text_width {
            return Err(Error::shape("prompt width does not match model text width"));
        }
        let resampled = resample_bilinear(input.prev.grid(), size)?;
        let mut x = params.input.apply_rows(resampled.data());
        add_assign(&mut x, &pe);
        streams.push(x);
    }

    for (layer, block) in params.blocks.iter().enumerate() {
        let mut states = Vec::with_capacity(inputs.len());
        for (x, input) in streams.iter().zip(inputs) {
            let u = rms_norm_rows(x, dm);
            states.push(AttentionState::from_projections(
                branch,
                step,
                layer,
                input.sample_index,
                dims.n_heads,
                tokens,
                &block.query.apply_rows(&u),
                &block.key.apply_rows(&u),
                &block.value.apply_rows(&u),
            ));
        }

        hook.on_self_attention(
            &HookContext {
                step,
                layer,
                branch,
            },
            &mut states,
        )?;

        for ((x, state), input) in streams.iter_mut().zip(&states).zip(inputs) {
            let attn = self_attention(state)?;
            add_assign(x, &block.out.apply_rows(&attn));

            if input.prompt.token_count() > 0 {
                let u = rms_norm_rows(x, dm);
                let out = cross_attention(block, dims.n_heads, tokens, &u, input.prompt);
                add_assign(x, &block.cross_out.apply_rows(&out));
            }

            let u = rms_norm_rows(x, dm);
            let hidden: Vec<f64> = block.ff_in.apply_rows(&u).into_iter().map(silu).collect();
            add_assign(x, &block.ff_out.apply_rows(&hidden));
        }
    }

    streams
        .iter()
        .map(|x| {
            let u = rms_norm_rows(x, dm);
            Grid::new(h, w, dims.channels, params.head.apply_rows(&u))
        })
        .collect()
}

fn cross_attention(
    block: &BlockParams,
    nh: usize,
    tokens: usize,
    u: &[f64],
    prompt: &EmbeddingBlock,
) -> Vec<f64> {
    let dm = block.cross_query.out_dim();
    let dh = dm / nh;
    let rows = prompt.token_count();
    let q = block.cross_query.apply_rows(u);
    let k = block.cross_key.apply_rows(prompt.data());
    let v = block.cross_value.apply_rows(prompt.data());
    let head_slice = |m: &[f64], n: usize, hd: usize| -> Vec<f64> {
        (0..n)
            .flat_map(|t| m[t * dm + hd * dh..t * dm + (hd + 1) * dh].iter().copied())
            .collect()
    };
    let mut out = vec![0.0; tokens * dm];
    for hd in 0..nh {
        let o = attend_head(
            &head_slice(&q, tokens, hd),
            &head_slice(&k, rows, hd),
            &head_slice(&v, rows, hd),
            dh,
        );
        for t in 0..tokens {
            out[t * dm + hd * dh..t * dm + (hd + 1) * dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
        }
    }
    out
}

/// Single-sample forward step.
#[allow(clippy::too_many_arguments)]
pub fn forward_step(
    params: &ModelParams,
    prev: &FeatureMap,
    prompt: &EmbeddingBlock,
    step: usize,
    size: (usize, usize),
    branch: Branch,
    hook: &mut dyn AttentionHook,
) -> Result<Grid> {
    let input = StepInput {
        prev,
        prompt,
        sample_index: 0,
    };
    let mut out = forward_batch(params, &[input], step, size, branch, hook)?;
    Ok(out.remove(0))
}
