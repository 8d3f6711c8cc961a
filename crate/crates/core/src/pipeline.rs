// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-path personalization.
//!
//! The content, style and generation paths advance in lockstep: every
//! layer of every step projects Q/K/V on all three paths, lets the plan
//! rewrite the generation packet from the other two, then finishes the
//! layer on all three. Each path draws from its own RNG stream derived
//! from the request seed, so a path's trace depends only on its own inputs.

use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode_style, read_ppm, resize_image, Image};
use crate::error::{Error, Result, ResultExt};
use crate::interventions::{feature_init, init_or_accumulate, share_attention, InterventionPlan, PlanOverrides};
use crate::model::{
    AttentionPacket, GenerationTrace, HookEvent, Model, ModelConfig, Stage, StepContext, StepOutput, TraceBuilder,
};
use crate::numerics::{checksum_hex, FeatureMap, RngStream};
use crate::textenc::{build_gen_prompt, encode_prompt, TextEmbedding};

/// The three lockstep paths, in barrier order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathId {
    Content,
    Style,
    Generation,
}

impl PathId {
    pub const ALL: [PathId; 3] = [Self::Content, Self::Style, Self::Generation];

    pub fn name(self) -> &'static str {
        match self {
            Self::Content => "content",
            Self::Style => "style",
            Self::Generation => "generation",
        }
    }

    /// Per-path RNG stream for `seed`.
    pub fn rng(self, seed: u64) -> RngStream {
        RngStream::derive(seed, self.name())
    }
}

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Requests and bundles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationRequest {
    pub content_prompt: String,
    pub style_prompt: String,
    pub style_image_path: PathBuf,
    pub seed: u64,
    pub cfg: ModelConfig,
    pub plan_overrides: Option<PlanOverrides>,
}

/// The three prompts of a run, as given and as composed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub content: String,
    pub style: String,
    pub generation: String,
}

impl PromptSet {
    pub fn new(content: &str, style: &str) -> Result<Self> {
        Ok(Self { content: content.to_owned(), style: style.to_owned(), generation: build_gen_prompt(content, style)? })
    }

    pub fn get(&self, path: PathId) -> &str {
        match path {
            PathId::Content => &self.content,
            PathId::Style => &self.style,
            PathId::Generation => &self.generation,
        }
    }
}

/// All three traces of a personalization run.
#[derive(Debug, Clone)]
pub struct TraceBundle {
    pub prompts: PromptSet,
    pub seed: u64,
    pub plan: InterventionPlan,
    /// Whether the style path was seeded from a reference image.
    pub style_image: bool,
    pub content: GenerationTrace,
    pub style: GenerationTrace,
    pub generation: GenerationTrace,
}

impl TraceBundle {
    pub fn trace(&self, path: PathId) -> &GenerationTrace {
        match path {
            PathId::Content => &self.content,
            PathId::Style => &self.style,
            PathId::Generation => &self.generation,
        }
    }

    /// Every hook fired on any path, in step order.
    pub fn events(&self) -> impl Iterator<Item = &HookEvent> {
        PathId::ALL.into_iter().flat_map(|p| self.trace(p).events())
    }

    pub fn report(&self, cfg: &ModelConfig) -> BundleReport {
        let steps = (1..=self.generation.len())
            .map(|step| {
                let path = |p: PathId| {
                    let rec = self.trace(p).step(step).expect("lockstep traces have equal length");
                    PathStepReport {
                        residual_checksum: checksum_hex(rec.residual.checksum()),
                        bits_checksum: checksum_hex(rec.bits.checksum()),
                        accumulated_checksum: checksum_hex(rec.accumulated.checksum()),
                        synthetic: rec.synthetic,
                        max_row_sum_error: rec.max_row_sum_error,
                        hooks: rec.events.clone(),
                    }
                };
                let alphas = self.generation.steps[step - 1]
                    .events
                    .iter()
                    .filter_map(|e| match e {
                        HookEvent::Aqs { alpha, .. } => Some(*alpha),
                        _ => None,
                    })
                    .collect();
                BundleStepReport {
                    step,
                    resolution: cfg.schedule.steps[step - 1],
                    stage: self.plan.stage(step),
                    content: path(PathId::Content),
                    style: path(PathId::Style),
                    generation: path(PathId::Generation),
                    alphas,
                }
            })
            .collect();
        BundleReport {
            prompts: self.prompts.clone(),
            seed: self.seed,
            style_image: self.style_image,
            plan: self.plan.clone(),
            config_hash: checksum_hex(cfg.config_hash()),
            steps,
        }
    }
}

/// One path at one step in `bundle.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStepReport {
    pub residual_checksum: String,
    pub bits_checksum: String,
    pub accumulated_checksum: String,
    pub synthetic: bool,
    pub max_row_sum_error: f64,
    pub hooks: Vec<HookEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleStepReport {
    pub step: usize,
    pub resolution: (usize, usize),
    pub stage: Stage,
    pub content: PathStepReport,
    pub style: PathStepReport,
    pub generation: PathStepReport,
    /// AQS weights applied on the generation path, one per event.
    pub alphas: Vec<f32>,
}

/// Serialized form of a [`TraceBundle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleReport {
    pub prompts: PromptSet,
    pub seed: u64,
    pub style_image: bool,
    pub plan: InterventionPlan,
    pub config_hash: String,
    pub steps: Vec<BundleStepReport>,
}

// ---------------------------------------------------------------------------
// Lockstep engine
// ---------------------------------------------------------------------------

struct PathState {
    id: PathId,
    text: TextEmbedding,
    rng: RngStream,
    builder: TraceBuilder,
    /// Plan used to decide feature replacement on this path.
    init_plan: InterventionPlan,
    ctx: Option<StepContext>,
    events: Vec<HookEvent>,
    packets: Vec<AttentionPacket>,
    max_row_sum_error: f64,
}

impl PathState {
    fn ctx(&mut self) -> &mut StepContext {
        self.ctx.as_mut().expect("step context is opened before layers run")
    }
}

/// Inputs to one three-path run.
struct LockstepRun<'a> {
    model: &'a Model,
    prompts: &'a PromptSet,
    plan: &'a InterventionPlan,
    style_feats: Option<&'a [FeatureMap]>,
    seed: u64,
    retain_packets: bool,
}

impl LockstepRun<'_> {
    fn run(&self) -> Result<TraceBundle> {
        let model = self.model;
        let cfg = model.config();
        self.plan.validate(cfg.schedule.len())?;
        if self.plan.qkv_swap.is_some() {
            return Err(Error::invalid("qkv_swap is a single-path diagnostic and cannot run in the pipeline"));
        }
        if let Some(feats) = self.style_feats {
            feature_init(self.plan, &cfg.schedule, feats)?;
        } else if self.plan.feature_init {
            return Err(Error::invalid("feature init needs a style image"));
        }
        let mut injections = std::collections::BTreeMap::new();
        for (&step, p) in &self.plan.prompt_injections {
            injections.insert(step, p.embed(cfg.d_text).context_with(|| format!("injection at step {step}"))?);
        }

        let style_plan = InterventionPlan { feature_init: self.style_feats.is_some(), ..self.plan.clone() };
        let mut states: Vec<PathState> = PathId::ALL
            .into_iter()
            .map(|id| {
                Ok(PathState {
                    id,
                    text: encode_prompt(self.prompts.get(id), cfg.d_text)?,
                    rng: id.rng(self.seed),
                    builder: model.trace_builder(self.retain_packets),
                    init_plan: match id {
                        PathId::Content => InterventionPlan { feature_init: false, ..self.plan.clone() },
                        PathId::Style => style_plan.clone(),
                        PathId::Generation => self.plan.clone(),
                    },
                    ctx: None,
                    events: Vec::new(),
                    packets: Vec::new(),
                    max_row_sum_error: 0.0,
                })
            })
            .collect::<Result<_>>()?;

        for step in 1..=cfg.schedule.len() {
            self.step(&mut states, step, injections.get(&step)).context_with(|| format!("step {step}"))?;
        }
        let mut traces = states.into_iter().map(|s| s.builder.finish());
        let (content, style, generation) = (traces.next().unwrap(), traces.next().unwrap(), traces.next().unwrap());
        Ok(TraceBundle {
            prompts: self.prompts.clone(),
            seed: self.seed,
            plan: self.plan.clone(),
            style_image: self.style_feats.is_some(),
            content,
            style,
            generation,
        })
    }

    fn step(&self, states: &mut [PathState], step: usize, injected: Option<&TextEmbedding>) -> Result<()> {
        let model = self.model;
        states.par_iter_mut().try_for_each(|st| -> Result<()> {
            assert_eq!(st.builder.next_step(), step, "{} path out of lockstep", st.id);
            st.ctx = Some(model.begin_step(step, st.builder.current()).context_with(|| st.id)?);
            st.events.clear();
            st.packets.clear();
            st.max_row_sum_error = 0.0;
            Ok(())
        })?;
        let gen_text = match injected {
            Some(alt) => {
                states[2].events.push(HookEvent::PromptInjection { step });
                alt.clone()
            }
            None => states[2].text.clone(),
        };

        for layer in 0..model.config().n_layers {
            let mut packets: Vec<AttentionPacket> = states
                .par_iter_mut()
                .map(|st| model.project_qkv(st.ctx(), layer).context_with(|| st.id))
                .collect::<Result<_>>()?;
            let (con_sty, gen) = packets.split_at_mut(2);
            share_attention(self.plan, &mut gen[0], &con_sty[0], &con_sty[1], &mut states[2].events)
                .context_with(|| PathId::Generation)?;
            states.par_iter_mut().zip(packets).try_for_each(|(st, packet)| -> Result<()> {
                let text = if st.id == PathId::Generation { &gen_text } else { &st.text };
                let ctx = st.ctx.as_mut().expect("step context is open");
                let stats = model.complete_layer(ctx, &packet, text).context_with(|| st.id)?;
                st.max_row_sum_error = st.max_row_sum_error.max(stats.max_row_sum_error);
                st.packets.push(packet);
                Ok(())
            })?;
        }

        states.par_iter_mut().try_for_each(|st| -> Result<()> {
            let ctx = st.ctx.take().expect("step context is open");
            let (residual, bits) = model.finish_step(ctx, &mut st.rng).context_with(|| st.id)?;
            let out = StepOutput {
                step,
                residual,
                bits,
                packets: std::mem::take(&mut st.packets),
                events: std::mem::take(&mut st.events),
                max_row_sum_error: st.max_row_sum_error,
            };
            init_or_accumulate(&st.init_plan, &mut st.builder, out, self.style_feats).context_with(|| st.id)?;
            Ok(())
        })
    }
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Decode `F_S` of a trace.
pub fn decode_trace(trace: &GenerationTrace, model: &Model) -> Result<Image> {
    let features = trace.final_features().ok_or_else(|| Error::invalid("trace has no steps"))?;
    decode(features, model)
}

/// Single-path generation without interventions.
pub fn baseline_generate(prompt: &str, cfg: &ModelConfig, seed: u64) -> Result<(Image, GenerationTrace)> {
    let model = Model::new(cfg.clone())?;
    baseline_generate_with(&model, prompt, seed, false)
}

/// [`baseline_generate`] on an existing model, optionally keeping attention packets.
pub fn baseline_generate_with(
    model: &Model,
    prompt: &str,
    seed: u64,
    retain_packets: bool,
) -> Result<(Image, GenerationTrace)> {
    if prompt.trim().is_empty() {
        return Err(Error::invalid("prompt must be non-empty"));
    }
    let text = encode_prompt(prompt, model.config().d_text)?;
    let mut rng = PathId::Generation.rng(seed);
    let trace = model.generate(&text, &mut crate::model::HookSet::new(), &mut rng, retain_packets)?;
    Ok((decode_trace(&trace, model)?, trace))
}

/// Full personalization from a request naming a style image on disk.
pub fn personalize(req: &PersonalizationRequest) -> Result<(Image, TraceBundle)> {
    let model = Model::new(req.cfg.clone())?;
    let image = read_ppm(&req.style_image_path)?;
    personalize_with_image(
        &model,
        &req.content_prompt,
        &req.style_prompt,
        &image,
        req.seed,
        req.plan_overrides.as_ref(),
    )
}

/// Personalization with an in-memory style image (resampled to the final resolution if needed).
pub fn personalize_with_image(
    model: &Model,
    content_prompt: &str,
    style_prompt: &str,
    style_image: &Image,
    seed: u64,
    overrides: Option<&PlanOverrides>,
) -> Result<(Image, TraceBundle)> {
    let mut plan = InterventionPlan::personalization(model.schedule());
    if let Some(o) = overrides {
        plan.apply(o);
    }
    personalize_with_plan(model, content_prompt, style_prompt, style_image, seed, &plan, false)
}

/// Personalization under an explicit plan.
pub fn personalize_with_plan(
    model: &Model,
    content_prompt: &str,
    style_prompt: &str,
    style_image: &Image,
    seed: u64,
    plan: &InterventionPlan,
    retain_packets: bool,
) -> Result<(Image, TraceBundle)> {
    let prompts = PromptSet::new(content_prompt, style_prompt)?;
    let (h, w) = model.schedule().final_resolution();
    let resized = resize_image(style_image, h, w)?;
    let feats = encode_style(&resized, model)?;
    let bundle =
        LockstepRun { model, prompts: &prompts, plan, style_feats: Some(&feats), seed, retain_packets }.run()?;
    Ok((decode_trace(&bundle.generation, model)?, bundle))
}

/// Style-aligned generation: no reference image, the style path runs from its prompt alone.
pub fn style_aligned_generate(
    content_prompt: &str,
    style_prompt: &str,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Image, TraceBundle)> {
    let model = Model::new(cfg.clone())?;
    style_aligned_generate_with(&model, content_prompt, style_prompt, seed, None)
}

/// [`style_aligned_generate`] on an existing model with optional plan overrides.
pub fn style_aligned_generate_with(
    model: &Model,
    content_prompt: &str,
    style_prompt: &str,
    seed: u64,
    overrides: Option<&PlanOverrides>,
) -> Result<(Image, TraceBundle)> {
    let prompts = PromptSet::new(content_prompt, style_prompt)?;
    let mut plan = InterventionPlan::personalization(model.schedule());
    if let Some(o) = overrides {
        plan.apply(o);
    }
    plan.feature_init = false;
    let bundle =
        LockstepRun { model, prompts: &prompts, plan: &plan, style_feats: None, seed, retain_packets: false }.run()?;
    Ok((decode_trace(&bundle.generation, model)?, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaleSchedule;

    fn small_model() -> Model {
        Model::new(ModelConfig {
            schedule: ScaleSchedule::square(&[1, 2, 4, 4, 8, 8], &[2, 3], &[4, 5]).unwrap(),
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn gradient(h: usize, w: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend([(x * 255 / w) as u8, (y * 255 / h) as u8, 90]);
            }
        }
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn hooks_fire_on_their_stages() {
        let model = small_model();
        let (_, bundle) =
            personalize_with_image(&model, "a red truck", "watercolor", &gradient(8, 8), 3, None).unwrap();
        let gen: Vec<(&str, usize)> = bundle.generation.events().map(|e| (e.name(), e.step())).collect();
        let steps = |name: &str| {
            let mut s: Vec<usize> = gen.iter().filter(|(n, _)| *n == name).map(|&(_, s)| s).collect();
            s.dedup();
            s
        };
        assert_eq!(steps("ksas"), vec![2, 3]);
        assert_eq!(steps("aqs"), vec![4, 5]);
        assert_eq!(steps("feature_init"), vec![1, 2]);
        assert!(bundle.content.events().next().is_none());
        assert_eq!(bundle.style.events().count(), 2);
        for e in bundle.generation.events() {
            if let HookEvent::Ksas { query_tokens, kv_tokens, .. } = e {
                assert_eq!(*kv_tokens, 2 * query_tokens);
            }
        }
    }

    #[test]
    fn neutral_plan_equals_baseline() {
        let model = small_model();
        let (img, bundle) = personalize_with_image(
            &model,
            "a red truck",
            "watercolor",
            &gradient(8, 8),
            5,
            Some(&PlanOverrides::neutral()),
        )
        .unwrap();
        let (base_img, base) = baseline_generate_with(&model, "a red truck in watercolor", 5, false).unwrap();
        assert_eq!(img, base_img);
        for (a, b) in bundle.generation.steps.iter().zip(&base.steps) {
            assert_eq!(a.residual, b.residual);
            assert_eq!(a.accumulated, b.accumulated);
        }
    }

    #[test]
    fn style_path_ignores_content_prompt() {
        let model = small_model();
        let run =
            |content: &str| personalize_with_image(&model, content, "ink sketch", &gradient(8, 8), 1, None).unwrap().1;
        let (a, b) = (run("a red truck"), run("a bowl of fruit"));
        for (x, y) in a.style.steps.iter().zip(&b.style.steps) {
            assert_eq!(x.residual, y.residual);
        }
    }

    #[test]
    fn content_path_ignores_style_image() {
        let model = small_model();
        let run = |img: &Image| personalize_with_image(&model, "a red truck", "ink", img, 1, None).unwrap().1;
        let (a, b) = (run(&gradient(8, 8)), run(&Image::filled(8, 8, [250, 10, 10])));
        for (x, y) in a.content.steps.iter().zip(&b.content.steps) {
            assert_eq!(x.residual, y.residual);
        }
    }

    #[test]
    fn style_aligned_has_no_feature_init() {
        let model = small_model();
        let (_, bundle) = style_aligned_generate_with(&model, "a red truck", "ink sketch", 2, None).unwrap();
        assert!(bundle.events().all(|e| !matches!(e, HookEvent::FeatureInit { .. })));
        assert!(bundle.events().any(|e| matches!(e, HookEvent::Ksas { .. })));
        assert!(!bundle.style_image);
    }

    #[test]
    fn bundle_report_round_trip() {
        let model = small_model();
        let (_, bundle) =
            personalize_with_image(&model, "a red truck", "watercolor", &gradient(5, 7), 9, None).unwrap();
        let report = bundle.report(model.config());
        assert_eq!(report.steps.len(), 6);
        assert_eq!(report.steps[3].alphas.len(), 2);
        let json = serde_json::to_string(&report).unwrap();
        let back: BundleReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn empty_prompts_rejected() {
        let model = small_model();
        let err = personalize_with_image(&model, " ", "ink", &gradient(8, 8), 0, None).unwrap_err();
        assert!(err.is_invalid_argument());
        assert!(baseline_generate_with(&model, "", 0, false).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn missing_style_image_is_io_error() {
        let req = PersonalizationRequest {
            content_prompt: "a red truck".into(),
            style_prompt: "ink".into(),
            style_image_path: "/nonexistent/style.ppm".into(),
            seed: 0,
            cfg: ModelConfig::default(),
            plan_overrides: None,
        };
        assert!(matches!(personalize(&req).unwrap_err().root(), Error::Io(_)));
    }
}
