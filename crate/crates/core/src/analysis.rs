// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostic harness: step-wise prompt injection and Q/K/V replacement.
//!
//! Both studies compare intervened single-path runs against an unmodified
//! baseline with the same seed and report image and feature distances.
//! Reports carry the full model config and its hash so any number in them
//! can be re-derived by re-running with the recorded inputs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::Image;
use crate::error::{Error, Result, ResultExt};
use crate::interventions::{generate_with_plan, inject_prompt, InterventionPlan, QkvSwap};
use crate::model::{GenerationTrace, Model, ModelConfig, QkvComponent};
use crate::numerics::{checksum_hex, FeatureMap};
use crate::pipeline::{decode_trace, PathId};
use crate::textenc::encode_prompt;

/// Ten base/alternative prompt pairs differing in one colour word.
pub const SAMPLE_PROMPT_PAIRS: [(&str, &str); 10] = [
    ("A photo of a red truck", "A photo of a green truck"),
    ("A photo of a yellow umbrella", "A photo of a purple umbrella"),
    ("A photo of a blue door", "A photo of an orange door"),
    ("A photo of a white cat", "A photo of a black cat"),
    ("A photo of a pink flamingo", "A photo of a grey flamingo"),
    ("A photo of a green apple", "A photo of a red apple"),
    ("A photo of a brown teapot", "A photo of a blue teapot"),
    ("A photo of an orange bicycle", "A photo of a white bicycle"),
    ("A photo of a purple flower", "A photo of a yellow flower"),
    ("A photo of a black car", "A photo of a pink car"),
];

// ---------------------------------------------------------------------------
// Distances
// ---------------------------------------------------------------------------

/// Mean over pixels of the Euclidean distance between colours in `[0, 1]³`.
pub fn image_distance(a: &Image, b: &Image) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let total: f64 = a
        .pixels()
        .chunks_exact(3)
        .zip(b.pixels().chunks_exact(3))
        .map(|(p, q)| {
            p.iter().zip(q).map(|(&x, &y)| ((f64::from(x) - f64::from(y)) / 255.0).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / (a.height() * a.width()) as f64)
}

/// `‖b − a‖ / ‖a‖`, or `‖b − a‖` when `a` is zero.
pub fn feature_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("feature shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        diff += (f64::from(y) - f64::from(x)).powi(2);
        norm += f64::from(x).powi(2);
    }
    Ok(if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() })
}

/// First step whose quantized residual differs between two traces.
pub fn first_divergent_step(a: &GenerationTrace, b: &GenerationTrace) -> Option<usize> {
    a.steps.iter().zip(&b.steps).find(|(x, y)| x.bits != y.bits).map(|(x, _)| x.step)
}

fn final_features(trace: &GenerationTrace) -> Result<&FeatureMap> {
    trace.final_features().ok_or_else(|| Error::invalid("trace has no steps"))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// The prompt pair under study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub base: String,
    pub alt: String,
}

/// Effect of replacing the prompt at exactly one step, for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCurve {
    pub prompts: PromptPair,
    pub seed: u64,
    pub config: ModelConfig,
    pub config_hash: String,
    pub steps: Vec<usize>,
    pub image_dist: Vec<f64>,
    pub feature_dist: Vec<f64>,
    /// Per injection step, the first step whose residual left the baseline.
    pub first_divergent_step: Vec<Option<usize>>,
}

/// One swapped component and how far its output lands from A and B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapVariant {
    pub component: QkvComponent,
    pub image_dist_to_a: f64,
    pub image_dist_to_b: f64,
    pub feature_dist_to_a: f64,
    pub feature_dist_to_b: f64,
    pub image_checksum: String,
}

/// B regenerated with each of Q, K, V taken from A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub prompts: PromptPair,
    pub seed: u64,
    pub config: ModelConfig,
    pub config_hash: String,
    pub steps: Vec<usize>,
    pub image_dist_ab: f64,
    pub variants: Vec<SwapVariant>,
}

/// A report that can be written as JSON and, optionally, a per-step CSV.
pub trait Report: Serialize + DeserializeOwned {
    fn csv(&self) -> Option<String> {
        None
    }
}

impl Report for InfluenceCurve {
    fn csv(&self) -> Option<String> {
        let mut out = String::from("step,image_dist,feature_dist\n");
        for ((s, i), f) in self.steps.iter().zip(&self.image_dist).zip(&self.feature_dist) {
            out.push_str(&format!("{s},{i},{f}\n"));
        }
        Some(out)
    }
}

impl Report for SwapReport {}

/// Write `report` as pretty JSON to `json_path`, plus `<stem>.csv` next to it
/// when the report has a tabular form. Returns the paths written.
pub fn emit_report<R: Report>(report: &R, json_path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let json_path = json_path.as_ref();
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(json_path, json).map_err(Error::from).context_with(|| json_path.display())?;
    let mut written = vec![json_path.to_path_buf()];
    if let Some(csv) = report.csv() {
        let csv_path = json_path.with_extension("csv");
        fs::write(&csv_path, csv).map_err(Error::from).context_with(|| csv_path.display())?;
        written.push(csv_path);
    }
    Ok(written)
}

/// Parse a report written by [`emit_report`].
pub fn read_report<R: Report>(json_path: impl AsRef<Path>) -> Result<R> {
    let json_path = json_path.as_ref();
    let text = fs::read_to_string(json_path).map_err(Error::from).context_with(|| json_path.display())?;
    serde_json::from_str(&text).map_err(Error::from).context_with(|| json_path.display())
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

fn single_path(
    model: &Model,
    prompt: &str,
    plan: &InterventionPlan,
    seed: u64,
    swap_source: Option<&GenerationTrace>,
    retain: bool,
) -> Result<(Image, GenerationTrace)> {
    let text = encode_prompt(prompt, model.config().d_text)?;
    let trace = generate_with_plan(model, &text, plan, &mut PathId::Generation.rng(seed), swap_source, retain)?;
    Ok((decode_trace(&trace, model)?, trace))
}

/// Inject `alt` at each step in turn and measure the distance to the baseline.
pub fn stepwise_influence(base: &str, alt: &str, cfg: &ModelConfig, seed: u64) -> Result<InfluenceCurve> {
    let model = Model::new(cfg.clone())?;
    stepwise_influence_with(&model, base, alt, seed)
}

pub fn stepwise_influence_with(model: &Model, base: &str, alt: &str, seed: u64) -> Result<InfluenceCurve> {
    let empty = InterventionPlan::empty(model.schedule());
    let (base_img, base_trace) = single_path(model, base, &empty, seed, None, false)?;
    let base_feats = final_features(&base_trace)?;
    let steps: Vec<usize> = (1..=model.schedule().len()).collect();
    let rows: Vec<(f64, f64, Option<usize>)> = steps
        .par_iter()
        .map(|&s| {
            let plan = inject_prompt(empty.clone(), s, alt)?;
            let (img, trace) = single_path(model, base, &plan, seed, None, false)?;
            Ok((
                image_distance(&base_img, &img)?,
                feature_distance(base_feats, final_features(&trace)?)?,
                first_divergent_step(&base_trace, &trace),
            ))
        })
        .collect::<Result<_>>()?;
    let cfg = model.config();
    Ok(InfluenceCurve {
        prompts: PromptPair { base: base.to_owned(), alt: alt.to_owned() },
        seed,
        config: cfg.clone(),
        config_hash: checksum_hex(cfg.config_hash()),
        steps,
        image_dist: rows.iter().map(|r| r.0).collect(),
        feature_dist: rows.iter().map(|r| r.1).collect(),
        first_divergent_step: rows.iter().map(|r| r.2).collect(),
    })
}

/// Regenerate `target` with `component` replaced at every step by `source`'s tensors.
pub fn swap_run(
    model: &Model,
    target: &str,
    source: &GenerationTrace,
    component: QkvComponent,
    seed: u64,
) -> Result<(Image, GenerationTrace)> {
    let plan = InterventionPlan {
        qkv_swap: Some(QkvSwap { component, steps: (1..=model.schedule().len()).collect(), source: "a".into() }),
        ..InterventionPlan::empty(model.schedule())
    };
    single_path(model, target, &plan, seed, Some(source), false)
}

/// Generate A from `base` and B from `alt`, then B with each of Q, K, V taken from A.
pub fn qkv_swap_study(base: &str, alt: &str, cfg: &ModelConfig, seed: u64) -> Result<SwapReport> {
    let model = Model::new(cfg.clone())?;
    qkv_swap_study_with(&model, base, alt, seed)
}

pub fn qkv_swap_study_with(model: &Model, base: &str, alt: &str, seed: u64) -> Result<SwapReport> {
    let empty = InterventionPlan::empty(model.schedule());
    let (img_a, trace_a) = single_path(model, base, &empty, seed, None, true)?;
    let (img_b, trace_b) = single_path(model, alt, &empty, seed, None, false)?;
    let (fa, fb) = (final_features(&trace_a)?, final_features(&trace_b)?);
    let variants = QkvComponent::ALL
        .par_iter()
        .map(|&component| {
            let (img, trace) =
                swap_run(model, alt, &trace_a, component, seed).context_with(|| format!("{component} swap"))?;
            let f = final_features(&trace)?;
            Ok(SwapVariant {
                component,
                image_dist_to_a: image_distance(&img, &img_a)?,
                image_dist_to_b: image_distance(&img, &img_b)?,
                feature_dist_to_a: feature_distance(fa, f)?,
                feature_dist_to_b: feature_distance(fb, f)?,
                image_checksum: checksum_hex(img.checksum()),
            })
        })
        .collect::<Result<_>>()?;
    let cfg = model.config();
    Ok(SwapReport {
        prompts: PromptPair { base: base.to_owned(), alt: alt.to_owned() },
        seed,
        config: cfg.clone(),
        config_hash: checksum_hex(cfg.config_hash()),
        steps: (1..=cfg.schedule.len()).collect(),
        image_dist_ab: image_distance(&img_a, &img_b)?,
        variants,
    })
}
