// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scale-wise autoregressive transformer.
//!
//! Step `s` average-pools the accumulated features `F_{s-1}` (kept at the
//! final resolution) down to the step grid `h_s × w_s`, embeds every site
//! into `d_model`, adds a 2-D sinusoidal position code, and runs `n_layers`
//! pre-norm blocks of self-attention, cross-attention to the prompt and a
//! GELU feed-forward. A linear head produces `c` logits per site which the
//! quantizer turns into the residual `R_s`. Step 1 starts from a seeded
//! start-of-sequence vector broadcast over its grid.
//!
//! All weights are drawn from a seeded [`RngStream`], uniform with standard
//! deviation `1/√fan_in`, so a [`ModelConfig`] fully determines a model.
//!
//! The forward pass is exposed at layer granularity
//! ([`Model::begin_step`], [`Model::project_qkv`], [`Model::complete_layer`],
//! [`Model::finish_step`]) so several paths can be advanced in lockstep and
//! exchange attention tensors between projection and attention.

mod attention;
mod hooks;
mod schedule;
mod trace;

pub use attention::{scaled_dot_product, AttentionPacket, HeadAttention, HeadQkv, QkvComponent};
pub use hooks::{AttentionHook, HookEvent, HookSet, NoopHook};
pub use schedule::{ScaleSchedule, Stage};
pub use trace::{GenerationTrace, StepOutput, StepRecord, StepReport, TraceBuilder, TraceReport};

pub(crate) use schedule::{stage_of, validate_stages};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::numerics::{area_pool, checksum_f32, fnv1a64, matmul, FeatureMap, RngStream, TokenMatrix};
use crate::quantizer::{logits_to_residual, BitGrid, QuantizerConfig};
use crate::textenc::TextEmbedding;

/// Span of the position code's coordinate axis; grid centres map into `[0, POS_SPAN)`.
const POS_SPAN: f64 = 32.0;
const LN_EPS: f64 = 1e-5;
const FF_MULT: usize = 4;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Quantized feature channels `c`; the implied codebook has `2^c` codes.
    pub channels: usize,
    pub d_text: usize,
    pub schedule: ScaleSchedule,
    pub weight_seed: u64,
    pub quantizer: QuantizerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            channels: 16,
            d_text: 32,
            schedule: ScaleSchedule::desk(),
            weight_seed: 0,
            quantizer: QuantizerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a multiple of 4 for the 2-D position code",
                self.d_model
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::invalid("n_layers must be at least 1"));
        }
        if self.d_text < crate::textenc::MIN_TEXT_DIM {
            return Err(Error::invalid(format!("d_text {} is too small", self.d_text)));
        }
        if self.quantizer.channels != self.channels {
            return Err(Error::invalid(format!(
                "quantizer has {} channels but the model has {}",
                self.quantizer.channels, self.channels
            )));
        }
        self.quantizer.validate()?;
        self.schedule.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// FNV-1a of the canonical JSON form.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// `y = x · W` with `W: in × out`, no bias.
#[derive(Debug, Clone)]
struct Linear {
    weight: TokenMatrix,
}

impl Linear {
    fn init(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Self {
        let bound = (3.0 / fan_in as f32).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.next_symmetric() * bound).collect();
        Self { weight: TokenMatrix::from_raw(fan_in, fan_out, data) }
    }

    fn apply(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        matmul(x, &self.weight)
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    fn init(rng: &mut RngStream, d: usize, d_text: usize) -> Self {
        Self {
            wq: Linear::init(rng, d, d),
            wk: Linear::init(rng, d, d),
            wv: Linear::init(rng, d, d),
            wo: Linear::init(rng, d, d),
            cq: Linear::init(rng, d, d),
            ck: Linear::init(rng, d_text, d),
            cv: Linear::init(rng, d_text, d),
            co: Linear::init(rng, d, d),
            ff_in: Linear::init(rng, d, FF_MULT * d),
            ff_out: Linear::init(rng, FF_MULT * d, d),
        }
    }

    fn linears(&self) -> [&Linear; 10] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.cq, &self.ck, &self.cv, &self.co, &self.ff_in, &self.ff_out]
    }
}

// ---------------------------------------------------------------------------
// Step state
// ---------------------------------------------------------------------------

/// Residual stream of one path during one step.
#[derive(Debug, Clone)]
pub struct StepContext {
    step: usize,
    height: usize,
    width: usize,
    x: TokenMatrix,
}

impl StepContext {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.x
    }
}

/// Summary of one layer's self-attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    pub query_tokens: usize,
    pub kv_tokens: usize,
    pub max_row_sum_error: f64,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Immutable seeded transformer plus the fixed decoder projection.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    sos: Vec<f32>,
    embed: Linear,
    blocks: Vec<Block>,
    head: Linear,
    /// `c × 3`: pixel logits are `f · decoder`.
    decoder: TokenMatrix,
    /// `3 × c` right inverse of `decoder`: `l · decoder_pinv · decoder = l`.
    decoder_pinv: TokenMatrix,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.weight_seed);
        let d = cfg.d_model;
        let sos = (0..d).map(|_| rng.next_symmetric() * 3f32.sqrt()).collect();
        let embed = Linear::init(&mut rng, cfg.channels, d);
        let blocks = (0..cfg.n_layers).map(|_| Block::init(&mut rng, d, cfg.d_text)).collect();
        let head = Linear::init(&mut rng, d, cfg.channels);
        let decoder = Linear::init(&mut rng, cfg.channels, 3).weight;
        let decoder_pinv = right_inverse(&decoder)?;
        Ok(Self { cfg, sos, embed, blocks, head, decoder, decoder_pinv })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.cfg.schedule
    }

    pub fn decoder(&self) -> &TokenMatrix {
        &self.decoder
    }

    pub fn decoder_pinv(&self) -> &TokenMatrix {
        &self.decoder_pinv
    }

    /// All projection weights in initialisation order (decoder excluded).
    pub fn projection_weights(&self) -> impl Iterator<Item = &[f32]> {
        std::iter::once(self.embed.weight.data())
            .chain(self.blocks.iter().flat_map(|b| b.linears().map(|l| l.weight.data())))
            .chain(std::iter::once(self.head.weight.data()))
    }

    /// FNV-1a over every weight, in initialisation order.
    pub fn checksum(&self) -> u64 {
        let mut all = self.sos.clone();
        for w in self.projection_weights() {
            all.extend_from_slice(w);
        }
        all.extend_from_slice(self.decoder.data());
        checksum_f32(&all)
    }

    // -- forward pass, layer granularity ------------------------------------

    /// Embed the step input: the start vector for step 1, pooled `F_{s-1}` after.
    pub fn begin_step(&self, step: usize, prev: Option<&FeatureMap>) -> Result<StepContext> {
        let (h, w) = self.cfg.schedule.resolution(step)?;
        let d = self.cfg.d_model;
        let mut x = match (step, prev) {
            (1, None) => TokenMatrix::from_raw(h * w, d, self.sos.iter().copied().cycle().take(h * w * d).collect()),
            (1, Some(_)) => return Err(Error::invalid("step 1 starts from the start-of-sequence vector")),
            (_, None) => return Err(Error::invalid(format!("step {step} needs F_{}", step - 1))),
            (_, Some(f)) => {
                let (fh, fw) = self.cfg.schedule.final_resolution();
                if f.shape() != (self.cfg.channels, fh, fw) {
                    return Err(Error::invalid(format!(
                        "F_{} has shape {:?}, expected ({}, {fh}, {fw})",
                        step - 1,
                        f.shape(),
                        self.cfg.channels
                    )));
                }
                let pooled = area_pool(f, h, w)?;
                self.embed.apply(&sites_to_tokens(&pooled))?
            }
        };
        add_position_code(&mut x, h, w);
        Ok(StepContext { step, height: h, width: w, x })
    }

    /// Pre-norm Q/K/V projection for `layer`, split into heads.
    pub fn project_qkv(&self, ctx: &StepContext, layer: usize) -> Result<AttentionPacket> {
        let block = self.block(layer)?;
        let h = layer_norm(&ctx.x);
        let (q, k, v) = (block.wq.apply(&h)?, block.wk.apply(&h)?, block.wv.apply(&h)?);
        Ok(AttentionPacket { step: ctx.step, layer, heads: self.split_heads(&q, &k, &v) })
    }

    /// Multi-head self-attention on a (possibly rewritten) packet, output-projected.
    pub fn self_attention(&self, packet: &AttentionPacket) -> Result<(TokenMatrix, AttentionStats)> {
        packet.validate()?;
        let block = self.block(packet.layer)?;
        if packet.heads.len() != self.cfg.n_heads || packet.heads[0].q.dim() != self.cfg.head_dim() {
            return Err(Error::invalid(format!(
                "packet has {} heads of width {}, model expects {} of width {}",
                packet.heads.len(),
                packet.heads[0].q.dim(),
                self.cfg.n_heads,
                self.cfg.head_dim()
            )));
        }
        let heads: Vec<HeadAttention> =
            packet.heads.par_iter().map(|h| scaled_dot_product(&h.q, &h.k, &h.v)).collect::<Result<_>>()?;
        let stats = AttentionStats {
            query_tokens: packet.query_tokens(),
            kv_tokens: packet.kv_tokens(),
            max_row_sum_error: heads.iter().map(HeadAttention::max_row_sum_error).fold(0.0, f64::max),
        };
        let merged = merge_heads(heads.iter().map(|h| &h.output));
        Ok((block.wo.apply(&merged)?, stats))
    }

    /// Multi-head attention from image tokens to prompt rows, output-projected.
    pub fn cross_attention(&self, layer: usize, tokens: &TokenMatrix, text: &TextEmbedding) -> Result<TokenMatrix> {
        let block = self.block(layer)?;
        if text.dim() != self.cfg.d_text || tokens.dim() != self.cfg.d_model {
            return Err(Error::invalid(format!(
                "cross-attention expects {}-wide tokens and {}-wide text, got {} and {}",
                self.cfg.d_model,
                self.cfg.d_text,
                tokens.dim(),
                text.dim()
            )));
        }
        let q = block.cq.apply(tokens)?;
        let k = block.ck.apply(text.matrix())?;
        let v = block.cv.apply(text.matrix())?;
        let heads = self.split_heads(&q, &k, &v);
        let outs: Vec<HeadAttention> =
            heads.iter().map(|h| scaled_dot_product(&h.q, &h.k, &h.v)).collect::<Result<_>>()?;
        block.co.apply(&merge_heads(outs.iter().map(|h| &h.output)))
    }

    /// Finish `packet.layer`: self-attention, cross-attention and feed-forward,
    /// each added back into the residual stream.
    pub fn complete_layer(
        &self,
        ctx: &mut StepContext,
        packet: &AttentionPacket,
        text: &TextEmbedding,
    ) -> Result<AttentionStats> {
        if packet.step != ctx.step || packet.query_tokens() != ctx.x.tokens() {
            return Err(Error::invalid(format!(
                "packet for step {} with {} queries does not match step {} with {} tokens",
                packet.step,
                packet.query_tokens(),
                ctx.step,
                ctx.x.tokens()
            )));
        }
        let (attn, stats) = self.self_attention(packet)?;
        ctx.x.add_assign(&attn)?;
        let cross = self.cross_attention(packet.layer, &layer_norm(&ctx.x), text)?;
        ctx.x.add_assign(&cross)?;
        let ff = self.feed_forward(packet.layer, &layer_norm(&ctx.x))?;
        ctx.x.add_assign(&ff)?;
        Ok(stats)
    }

    /// Head logits (`c × h_s × w_s`) for a finished residual stream.
    pub fn logits(&self, ctx: &StepContext) -> Result<FeatureMap> {
        let tok = self.head.apply(&layer_norm(&ctx.x))?;
        Ok(tokens_to_sites(&tok, ctx.height, ctx.width))
    }

    /// Quantize the step's logits into `R_s`.
    pub fn finish_step(&self, ctx: StepContext, rng: &mut RngStream) -> Result<(FeatureMap, BitGrid)> {
        let logits = self.logits(&ctx)?;
        let (bits, residual) = logits_to_residual(&logits, &self.cfg.quantizer, rng)?;
        Ok((residual, bits))
    }

    // -- whole steps ------------------------------------------------------

    /// One full step: `R_s = M(F_{s-1}, text)` with hooks fired after every
    /// Q/K/V projection.
    pub fn predict_residual(
        &self,
        prev: Option<&FeatureMap>,
        text: &TextEmbedding,
        step: usize,
        hooks: &mut HookSet<'_>,
        rng: &mut RngStream,
    ) -> Result<StepOutput> {
        let mut ctx = self.begin_step(step, prev)?;
        let mut events = Vec::new();
        let text = match hooks.text_override(step) {
            Some(alt) => {
                events.push(HookEvent::PromptInjection { step });
                alt.clone()
            }
            None => text.clone(),
        };
        let mut packets = Vec::with_capacity(self.cfg.n_layers);
        let mut max_err = 0.0f64;
        for layer in 0..self.cfg.n_layers {
            let mut packet = self.project_qkv(&ctx, layer)?;
            hooks.apply(&mut packet, &mut events)?;
            let stats = self.complete_layer(&mut ctx, &packet, &text)?;
            max_err = max_err.max(stats.max_row_sum_error);
            packets.push(packet);
        }
        let (residual, bits) = self.finish_step(ctx, rng)?;
        Ok(StepOutput { step, residual, bits, packets, events, max_row_sum_error: max_err })
    }

    /// Run every scheduled step, accumulating `F_s` at the final resolution.
    pub fn generate(
        &self,
        text: &TextEmbedding,
        hooks: &mut HookSet<'_>,
        rng: &mut RngStream,
        retain_packets: bool,
    ) -> Result<GenerationTrace> {
        let mut builder = self.trace_builder(retain_packets);
        for step in 1..=self.cfg.schedule.len() {
            let out = self
                .predict_residual(builder.current(), text, step, hooks, rng)
                .context_with(|| format!("step {step}"))?;
            builder.push(out)?;
        }
        Ok(builder.finish())
    }

    pub fn trace_builder(&self, retain_packets: bool) -> TraceBuilder {
        TraceBuilder::new(self.cfg.channels, self.cfg.schedule.final_resolution(), retain_packets)
    }

    // -- helpers ----------------------------------------------------------

    fn block(&self, layer: usize) -> Result<&Block> {
        self.blocks.get(layer).ok_or_else(|| Error::invalid(format!("layer {layer} outside 0..{}", self.blocks.len())))
    }

    fn feed_forward(&self, layer: usize, x: &TokenMatrix) -> Result<TokenMatrix> {
        let block = self.block(layer)?;
        let mut hidden = block.ff_in.apply(x)?;
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        block.ff_out.apply(&hidden)
    }

    fn split_heads(&self, q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Vec<HeadQkv> {
        let dh = self.cfg.head_dim();
        (0..self.cfg.n_heads)
            .map(|i| HeadQkv { q: q.columns(i * dh, dh), k: k.columns(i * dh, dh), v: v.columns(i * dh, dh) })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Free helpers
// ---------------------------------------------------------------------------

/// Site-major rows (`N = h·w`, row `y·w + x`) from a channel-major map.
pub fn sites_to_tokens(map: &FeatureMap) -> TokenMatrix {
    let (c, h, w) = map.shape();
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            data.extend((0..c).map(|ch| map.get(ch, y, x)));
        }
    }
    TokenMatrix::from_raw(h * w, c, data)
}

/// Inverse of [`sites_to_tokens`].
pub fn tokens_to_sites(tok: &TokenMatrix, height: usize, width: usize) -> FeatureMap {
    let c = tok.dim();
    let mut map = FeatureMap::zeros(c, height, width);
    for y in 0..height {
        for x in 0..width {
            let row = tok.row(y * width + x);
            for (ch, &v) in row.iter().enumerate() {
                map.set(ch, y, x, v);
            }
        }
    }
    map
}

fn merge_heads<'a>(heads: impl Iterator<Item = &'a TokenMatrix>) -> TokenMatrix {
    let heads: Vec<&TokenMatrix> = heads.collect();
    let n = heads[0].tokens();
    let width: usize = heads.iter().map(|h| h.dim()).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for h in &heads {
            data.extend_from_slice(h.row(i));
        }
    }
    TokenMatrix::from_raw(n, width, data)
}

/// Parameter-free layer norm per token.
pub fn layer_norm(x: &TokenMatrix) -> TokenMatrix {
    let d = x.dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = ((f64::from(*v) - mean) * inv) as f32;
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // √(2/π)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

/// Half the channels encode the row coordinate, half the column; each half
/// is interleaved sin/cos over geometric frequencies.
fn add_position_code(x: &mut TokenMatrix, height: usize, width: usize) {
    let half = x.dim() / 2;
    let code = |coord: f64, i: usize| -> f32 {
        let angle = coord / 10_000f64.powf(2.0 * (i / 2) as f64 / half as f64);
        (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
    };
    for y in 0..height {
        let cy = (y as f64 + 0.5) / height as f64 * POS_SPAN;
        for xi in 0..width {
            let cx = (xi as f64 + 0.5) / width as f64 * POS_SPAN;
            let row = x.row_mut(y * width + xi);
            for i in 0..half {
                row[i] += code(cy, i);
                row[half + i] += code(cx, i);
            }
        }
    }
}

/// Right inverse of a `c × 3` matrix `m`: `P = (mᵀm)⁻¹ mᵀ`, so `P·m = I₃`.
fn right_inverse(m: &TokenMatrix) -> Result<TokenMatrix> {
    let c = m.tokens();
    let mut g = [[0.0f64; 3]; 3];
    for (i, row) in g.iter_mut().enumerate() {
        for (j, g_ij) in row.iter_mut().enumerate() {
            *g_ij = (0..c).map(|k| f64::from(m.get(k, i)) * f64::from(m.get(k, j))).sum();
        }
    }
    let det = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1]) - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
        + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
    if det.abs() < 1e-12 {
        return Err(Error::invalid("decoder projection is rank deficient"));
    }
    let mut inv = [[0.0f64; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cofactor of g[j][i]
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (g[r0][c0] * g[r1][c1] - g[r0][c1] * g[r1][c0]) / det;
        }
    }
    let mut data = Vec::with_capacity(3 * c);
    for row in &inv {
        for k in 0..c {
            let v: f64 = (0..3).map(|j| row[j] * f64::from(m.get(k, j))).sum();
            data.push(v as f32);
        }
    }
    Ok(TokenMatrix::from_raw(3, c, data))
}
