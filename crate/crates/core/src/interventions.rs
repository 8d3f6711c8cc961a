// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention plans and the hooks that realise them.
//!
//! Single-path mechanisms (prompt injection, Q/K/V replacement) become
//! entries of a [`HookSet`]. Cross-path mechanisms (key-stage attention
//! sharing, adaptive query sharing, feature initialisation) need the other
//! paths' tensors and are applied by the pipeline at its per-layer barrier
//! through [`share_attention`] and [`init_or_accumulate`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::model::{
    stage_of, validate_stages, AttentionHook, AttentionPacket, GenerationTrace, HookEvent, HookSet, Model,
    QkvComponent, ScaleSchedule, Stage, StepOutput, TraceBuilder,
};
use crate::numerics::{cosine_sim, FeatureMap, RngStream, TokenMatrix};
use crate::textenc::{encode_prompt, TextEmbedding};

// ---------------------------------------------------------------------------
// Plan
// ---------------------------------------------------------------------------

/// Alternative conditioning for one step: a prompt to encode, or a ready embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InjectedPrompt {
    Prompt(String),
    Embedding(TextEmbedding),
}

impl InjectedPrompt {
    pub fn embed(&self, d_text: usize) -> Result<TextEmbedding> {
        match self {
            Self::Prompt(p) => encode_prompt(p, d_text),
            Self::Embedding(e) if e.dim() == d_text => Ok(e.clone()),
            Self::Embedding(e) => {
                Err(Error::invalid(format!("injected embedding is {} wide, model expects {d_text}", e.dim())))
            }
        }
    }
}

impl From<&str> for InjectedPrompt {
    fn from(p: &str) -> Self {
        Self::Prompt(p.to_owned())
    }
}

impl From<TextEmbedding> for InjectedPrompt {
    fn from(e: TextEmbedding) -> Self {
        Self::Embedding(e)
    }
}

/// Replace one projection with tensors recorded in another run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QkvSwap {
    pub component: QkvComponent,
    pub steps: BTreeSet<usize>,
    /// Identifier of the recorded run supplying the tensors.
    pub source: String,
}

/// How many cosine similarities adaptive query sharing computes per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AqsGranularity {
    /// One α over all heads' flattened queries.
    #[default]
    Layer,
    /// One α per head.
    Head,
    /// One α per query token (row across heads).
    Token,
}

/// Every hook a run may fire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionPlan {
    pub feature_init: bool,
    pub ksas: bool,
    pub aqs: bool,
    pub alpha_override: Option<f32>,
    #[serde(rename = "S_key")]
    pub key_steps: BTreeSet<usize>,
    #[serde(rename = "S_fine")]
    pub fine_steps: BTreeSet<usize>,
    pub prompt_injections: BTreeMap<usize, InjectedPrompt>,
    pub qkv_swap: Option<QkvSwap>,
    pub aqs_granularity: AqsGranularity,
}

impl Default for InterventionPlan {
    fn default() -> Self {
        Self::personalization(&ScaleSchedule::desk())
    }
}

impl InterventionPlan {
    /// Full stack: feature init, KSAS over the key stage, AQS over the fine stage.
    pub fn personalization(schedule: &ScaleSchedule) -> Self {
        Self {
            feature_init: true,
            ksas: true,
            aqs: true,
            alpha_override: None,
            key_steps: schedule.key_steps.iter().copied().collect(),
            fine_steps: schedule.fine_steps.iter().copied().collect(),
            prompt_injections: BTreeMap::new(),
            qkv_swap: None,
            aqs_granularity: AqsGranularity::Layer,
        }
    }

    /// Nothing fires.
    pub fn empty(schedule: &ScaleSchedule) -> Self {
        Self { feature_init: false, ksas: false, aqs: false, ..Self::personalization(schedule) }
    }

    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        let key: Vec<usize> = self.key_steps.iter().copied().collect();
        let fine: Vec<usize> = self.fine_steps.iter().copied().collect();
        validate_stages(&key, &fine, schedule_len)?;
        if let Some(a) = self.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("alpha_override {a} outside [0, 1]")));
            }
        }
        if let Some(&s) = self.prompt_injections.keys().find(|&&s| s == 0 || s > schedule_len) {
            return Err(Error::invalid(format!("prompt injection at step {s} outside 1..={schedule_len}")));
        }
        if let Some(swap) = &self.qkv_swap {
            if swap.steps.is_empty() {
                return Err(Error::invalid("qkv_swap has no steps"));
            }
            if let Some(&s) = swap.steps.iter().find(|&&s| s == 0 || s > schedule_len) {
                return Err(Error::invalid(format!("qkv_swap step {s} outside 1..={schedule_len}")));
            }
        }
        Ok(())
    }

    pub fn stage(&self, step: usize) -> Stage {
        let key: Vec<usize> = self.key_steps.iter().copied().collect();
        let fine: Vec<usize> = self.fine_steps.iter().copied().collect();
        stage_of(step, &key, &fine)
    }

    /// Steps whose features are replaced when feature init is on: `1..=min(S_key)`.
    pub fn init_steps(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.key_steps.first().copied().unwrap_or(0)
    }

    pub fn initializes(&self, step: usize) -> bool {
        self.feature_init && self.init_steps().contains(&step)
    }

    pub fn shares_keys(&self, step: usize) -> bool {
        self.ksas && self.key_steps.contains(&step)
    }

    pub fn shares_queries(&self, step: usize) -> bool {
        self.aqs && self.fine_steps.contains(&step)
    }

    pub fn needs_cross_path(&self) -> bool {
        self.feature_init || self.ksas || self.aqs
    }

    pub fn apply(&mut self, overrides: &PlanOverrides) {
        overrides.apply_to(self);
    }
}

/// Partial plan: every present field replaces the corresponding plan field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_init: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ksas: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aqs: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_override: Option<f32>,
    #[serde(rename = "S_key", skip_serializing_if = "Option::is_none")]
    pub key_steps: Option<BTreeSet<usize>>,
    #[serde(rename = "S_fine", skip_serializing_if = "Option::is_none")]
    pub fine_steps: Option<BTreeSet<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_injections: Option<BTreeMap<usize, InjectedPrompt>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qkv_swap: Option<QkvSwap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aqs_granularity: Option<AqsGranularity>,
}

impl PlanOverrides {
    /// Feature init and KSAS off, AQS pinned to α = 1.
    pub fn neutral() -> Self {
        Self { feature_init: Some(false), ksas: Some(false), alpha_override: Some(1.0), ..Self::default() }
    }

    pub fn apply_to(&self, plan: &mut InterventionPlan) {
        if let Some(v) = self.feature_init {
            plan.feature_init = v;
        }
        if let Some(v) = self.ksas {
            plan.ksas = v;
        }
        if let Some(v) = self.aqs {
            plan.aqs = v;
        }
        if self.alpha_override.is_some() {
            plan.alpha_override = self.alpha_override;
        }
        if let Some(v) = &self.key_steps {
            plan.key_steps = v.clone();
        }
        if let Some(v) = &self.fine_steps {
            plan.fine_steps = v.clone();
        }
        if let Some(v) = &self.prompt_injections {
            plan.prompt_injections = v.clone();
        }
        if self.qkv_swap.is_some() {
            plan.qkv_swap = self.qkv_swap.clone();
        }
        if let Some(v) = self.aqs_granularity {
            plan.aqs_granularity = v;
        }
    }
}

/// Add an injection at `step`; a second injection at the same step is rejected.
pub fn inject_prompt(
    mut plan: InterventionPlan,
    step: usize,
    text: impl Into<InjectedPrompt>,
) -> Result<InterventionPlan> {
    if step == 0 {
        return Err(Error::invalid("steps are 1-based"));
    }
    if plan.prompt_injections.contains_key(&step) {
        return Err(Error::invalid(format!("step {step} already has a prompt injection")));
    }
    plan.prompt_injections.insert(step, text.into());
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Key-stage attention sharing
// ---------------------------------------------------------------------------

/// `Q̂ = Q^con`, `K̂ = [K^con; K^sty]`, `V̂ = [V^gen; V^sty]` per head.
pub fn ksas(
    gen: &AttentionPacket,
    con: &AttentionPacket,
    sty: &AttentionPacket,
    step: usize,
) -> Result<AttentionPacket> {
    if gen.step != step {
        return Err(Error::invalid(format!("packet is for step {}, not {step}", gen.step)));
    }
    if !gen.same_shape(con) || !gen.same_shape(sty) {
        return Err(Error::invalid(format!(
            "attention sharing needs matching packets at step {step} layer {}",
            gen.layer
        )));
    }
    let heads = gen
        .heads
        .iter()
        .zip(&con.heads)
        .zip(&sty.heads)
        .map(|((g, c), s)| {
            Ok(crate::model::HeadQkv { q: c.q.clone(), k: c.k.concat_tokens(&s.k)?, v: g.v.concat_tokens(&s.v)? })
        })
        .collect::<Result<_>>()?;
    Ok(AttentionPacket { step, layer: gen.layer, heads })
}

// ---------------------------------------------------------------------------
// Adaptive query sharing
// ---------------------------------------------------------------------------

/// `α · g + (1 − α) · c`, evaluated in f64 so the result stays inside `[g, c]`.
fn blend(g: &[f32], c: &[f32], alpha: f32, out: &mut [f32]) {
    let a = f64::from(alpha);
    for ((o, &x), &y) in out.iter_mut().zip(g).zip(c) {
        *o = (a * f64::from(x) + (1.0 - a) * f64::from(y)) as f32;
    }
}

fn similarity_alpha(g: &[f32], c: &[f32], alpha_override: Option<f32>) -> Result<f32> {
    match alpha_override {
        Some(a) if (0.0..=1.0).contains(&a) => Ok(a),
        Some(a) => Err(Error::invalid(format!("alpha {a} outside [0, 1]"))),
        None => Ok(cosine_sim(g, c)?.clamp(0.0, 1.0)),
    }
}

/// `Q̄ = α·Q_gen + (1−α)·Q_con` with `α = clamp(cos(Q_gen, Q_con), 0, 1)` unless overridden.
pub fn aqs(q_gen: &TokenMatrix, q_con: &TokenMatrix, alpha_override: Option<f32>) -> Result<(TokenMatrix, f32)> {
    if (q_gen.tokens(), q_gen.dim()) != (q_con.tokens(), q_con.dim()) {
        return Err(Error::invalid(format!(
            "query shapes differ: {}x{} vs {}x{}",
            q_gen.tokens(),
            q_gen.dim(),
            q_con.tokens(),
            q_con.dim()
        )));
    }
    let alpha = similarity_alpha(q_gen.data(), q_con.data(), alpha_override)?;
    let mut out = q_gen.clone();
    blend(q_gen.data(), q_con.data(), alpha, out.data_mut());
    Ok((out, alpha))
}

/// Blend the generation packet's queries toward the content packet's.
/// Returns the α values used, in head-major or token order per granularity.
pub fn aqs_packet(
    gen: &mut AttentionPacket,
    con: &AttentionPacket,
    alpha_override: Option<f32>,
    granularity: AqsGranularity,
) -> Result<Vec<f32>> {
    if gen.heads.len() != con.heads.len()
        || gen.heads.iter().zip(&con.heads).any(|(g, c)| (g.q.tokens(), g.q.dim()) != (c.q.tokens(), c.q.dim()))
    {
        return Err(Error::invalid(format!(
            "query sharing needs matching packets at step {} layer {}",
            gen.step, gen.layer
        )));
    }
    match granularity {
        AqsGranularity::Layer => {
            let alpha = similarity_alpha(&gen.flat_queries(), &con.flat_queries(), alpha_override)?;
            for (g, c) in gen.heads.iter_mut().zip(&con.heads) {
                let src = g.q.clone();
                blend(src.data(), c.q.data(), alpha, g.q.data_mut());
            }
            Ok(vec![alpha])
        }
        AqsGranularity::Head => gen
            .heads
            .iter_mut()
            .zip(&con.heads)
            .map(|(g, c)| {
                let (q, alpha) = aqs(&g.q, &c.q, alpha_override)?;
                g.q = q;
                Ok(alpha)
            })
            .collect(),
        AqsGranularity::Token => {
            let n = gen.query_tokens();
            let mut alphas = Vec::with_capacity(n);
            for i in 0..n {
                let g_row: Vec<f32> = gen.heads.iter().flat_map(|h| h.q.row(i).iter().copied()).collect();
                let c_row: Vec<f32> = con.heads.iter().flat_map(|h| h.q.row(i).iter().copied()).collect();
                let alpha = similarity_alpha(&g_row, &c_row, alpha_override)?;
                for (g, c) in gen.heads.iter_mut().zip(&con.heads) {
                    let src = g.q.row(i).to_vec();
                    blend(&src, c.q.row(i), alpha, g.q.row_mut(i));
                }
                alphas.push(alpha);
            }
            Ok(alphas)
        }
    }
}

/// Apply whichever cross-path mechanism the plan schedules for this packet's
/// step to the generation packet, logging what fired.
pub fn share_attention(
    plan: &InterventionPlan,
    gen: &mut AttentionPacket,
    con: &AttentionPacket,
    sty: &AttentionPacket,
    events: &mut Vec<HookEvent>,
) -> Result<()> {
    let (step, layer) = (gen.step, gen.layer);
    if plan.shares_keys(step) {
        *gen = ksas(gen, con, sty, step)?;
        events.push(HookEvent::Ksas { step, layer, query_tokens: gen.query_tokens(), kv_tokens: gen.kv_tokens() });
    } else if plan.shares_queries(step) {
        for alpha in aqs_packet(gen, con, plan.alpha_override, plan.aqs_granularity)? {
            events.push(HookEvent::Aqs { step, layer, alpha });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature initialisation
// ---------------------------------------------------------------------------

/// Record a step, replacing its features with `style_feats[step-1]` when the
/// plan initialises this step; otherwise accumulate the prediction normally.
/// Returns whether the step was replaced.
pub fn init_or_accumulate(
    plan: &InterventionPlan,
    builder: &mut TraceBuilder,
    out: StepOutput,
    style_feats: Option<&[FeatureMap]>,
) -> Result<bool> {
    let step = out.step;
    if !plan.initializes(step) {
        builder.push(out)?;
        return Ok(false);
    }
    let feats = style_feats
        .and_then(|f| f.get(step - 1))
        .ok_or_else(|| Error::invalid(format!("style features missing scale for step {step}")))?;
    let (h, w) = (out.residual.height(), out.residual.width());
    if (feats.height(), feats.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "style features for step {step} are {}x{}, expected {h}x{w}",
            feats.height(),
            feats.width()
        )));
    }
    builder.push_replaced(out, feats.clone())?;
    Ok(true)
}

/// Check that per-scale style features cover every initialised step.
pub fn feature_init(plan: &InterventionPlan, schedule: &ScaleSchedule, style_feats: &[FeatureMap]) -> Result<()> {
    if !plan.feature_init {
        return Ok(());
    }
    for step in plan.init_steps() {
        let (h, w) = schedule.resolution(step)?;
        match style_feats.get(step - 1) {
            Some(f) if (f.height(), f.width()) == (h, w) => {}
            _ => return Err(Error::invalid(format!("style features missing scale {h}x{w} for step {step}"))),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Q/K/V replacement
// ---------------------------------------------------------------------------

/// Overwrites one projection with the matching packet of a recorded trace.
#[derive(Debug, Clone)]
pub struct QkvSwapHook<'a> {
    source: &'a GenerationTrace,
    component: QkvComponent,
    steps: BTreeSet<usize>,
}

impl<'a> QkvSwapHook<'a> {
    pub fn new(source: &'a GenerationTrace, component: QkvComponent, steps: BTreeSet<usize>) -> Self {
        Self { source, component, steps }
    }
}

impl AttentionHook for QkvSwapHook<'_> {
    fn on_qkv(&mut self, packet: &mut AttentionPacket, events: &mut Vec<HookEvent>) -> Result<()> {
        if !self.steps.contains(&packet.step) {
            return Ok(());
        }
        let (step, layer) = (packet.step, packet.layer);
        let recorded = self.source.packet(step, layer).ok_or_else(|| {
            Error::invalid(format!("source trace has no recorded packet for step {step} layer {layer}"))
        })?;
        if recorded.heads.len() != packet.heads.len() {
            return Err(Error::invalid(format!(
                "source packet at step {step} layer {layer} has a different head count"
            )));
        }
        for (dst, src) in packet.heads.iter_mut().zip(&recorded.heads) {
            let (d, s) = (dst.component_mut(self.component), src.component(self.component));
            if (d.tokens(), d.dim()) != (s.tokens(), s.dim()) {
                return Err(Error::invalid(format!(
                    "source {} at step {step} layer {layer} is {}x{}, target is {}x{}",
                    self.component,
                    s.tokens(),
                    s.dim(),
                    d.tokens(),
                    d.dim()
                )));
            }
            *d = s.clone();
        }
        events.push(HookEvent::QkvSwap { step, layer, component: self.component });
        Ok(())
    }
}

/// Hook replacing `component` at `steps` with tensors from `source`.
pub fn swap_qkv(source: &GenerationTrace, component: QkvComponent, steps: BTreeSet<usize>) -> QkvSwapHook<'_> {
    QkvSwapHook::new(source, component, steps)
}

// ---------------------------------------------------------------------------
// Single-path runs
// ---------------------------------------------------------------------------

/// Hooks for the single-path parts of a plan: injections and the swap.
pub fn plan_hooks<'a>(
    model: &Model,
    plan: &InterventionPlan,
    swap_source: Option<&'a GenerationTrace>,
) -> Result<HookSet<'a>> {
    plan.validate(model.schedule().len())?;
    let mut hooks = HookSet::new();
    for (&step, prompt) in &plan.prompt_injections {
        hooks.override_text(
            step,
            prompt.embed(model.config().d_text).context_with(|| format!("injection at step {step}"))?,
        );
    }
    if let Some(swap) = &plan.qkv_swap {
        let source = swap_source.ok_or_else(|| {
            Error::invalid(format!("qkv_swap names source {:?} but no recorded trace was supplied", swap.source))
        })?;
        hooks.push(swap_qkv(source, swap.component, swap.steps.clone()));
    }
    Ok(hooks)
}

/// Single-path generation under a plan. Cross-path mechanisms need the
/// three-path pipeline and are rejected here.
pub fn generate_with_plan(
    model: &Model,
    text: &TextEmbedding,
    plan: &InterventionPlan,
    rng: &mut RngStream,
    swap_source: Option<&GenerationTrace>,
    retain_packets: bool,
) -> Result<GenerationTrace> {
    if plan.needs_cross_path() {
        return Err(Error::invalid(
            "feature init, KSAS and AQS need the three-path pipeline; disable them for single-path runs",
        ));
    }
    let mut hooks = plan_hooks(model, plan, swap_source)?;
    model.generate(text, &mut hooks, rng, retain_packets)
}
