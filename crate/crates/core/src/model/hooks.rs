// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook points fired during a forward pass.
//!
//! Attention hooks run once per (step, layer), right after the Q/K/V
//! projection and before attention is computed. Text overrides replace the
//! cross-attention conditioning for a single step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::attention::{AttentionPacket, QkvComponent};
use crate::error::Result;
use crate::textenc::TextEmbedding;

/// One applied intervention, as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HookEvent {
    /// Accumulated features replaced by style-image features.
    FeatureInit { step: usize },
    /// Cross-attention at this step used the alternative prompt.
    PromptInjection { step: usize },
    /// Key-stage sharing widened keys/values to `kv_tokens`.
    Ksas { step: usize, layer: usize, query_tokens: usize, kv_tokens: usize },
    /// Adaptive query blend with weight `alpha` on the generation query.
    Aqs { step: usize, layer: usize, alpha: f32 },
    /// A projection was overwritten with a recorded tensor.
    QkvSwap { step: usize, layer: usize, component: QkvComponent },
}

impl HookEvent {
    pub fn step(&self) -> usize {
        match *self {
            Self::FeatureInit { step }
            | Self::PromptInjection { step }
            | Self::Ksas { step, .. }
            | Self::Aqs { step, .. }
            | Self::QkvSwap { step, .. } => step,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FeatureInit { .. } => "feature_init",
            Self::PromptInjection { .. } => "prompt_injection",
            Self::Ksas { .. } => "ksas",
            Self::Aqs { .. } => "aqs",
            Self::QkvSwap { .. } => "qkv_swap",
        }
    }
}

/// Called with each freshly projected packet; may rewrite it in place.
pub trait AttentionHook {
    fn on_qkv(&mut self, packet: &mut AttentionPacket, events: &mut Vec<HookEvent>) -> Result<()>;
}

impl<F> AttentionHook for F
where
    F: FnMut(&mut AttentionPacket, &mut Vec<HookEvent>) -> Result<()>,
{
    fn on_qkv(&mut self, packet: &mut AttentionPacket, events: &mut Vec<HookEvent>) -> Result<()> {
        self(packet, events)
    }
}

/// Hook that leaves packets untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopHook;

impl AttentionHook for NoopHook {
    fn on_qkv(&mut self, _: &mut AttentionPacket, _: &mut Vec<HookEvent>) -> Result<()> {
        Ok(())
    }
}

/// Everything that may fire during one single-path generation.
#[derive(Default)]
pub struct HookSet<'a> {
    hooks: Vec<Box<dyn AttentionHook + Send + 'a>>,
    text_overrides: BTreeMap<usize, TextEmbedding>,
}

impl<'a> HookSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, hook: impl AttentionHook + Send + 'a) -> &mut Self {
        self.hooks.push(Box::new(hook));
        self
    }

    /// Condition `step` on `text` instead of the base prompt.
    pub fn override_text(&mut self, step: usize, text: TextEmbedding) -> &mut Self {
        self.text_overrides.insert(step, text);
        self
    }

    pub fn text_override(&self, step: usize) -> Option<&TextEmbedding> {
        self.text_overrides.get(&step)
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty() && self.text_overrides.is_empty()
    }

    pub(crate) fn apply(&mut self, packet: &mut AttentionPacket, events: &mut Vec<HookEvent>) -> Result<()> {
        for hook in &mut self.hooks {
            hook.on_qkv(packet, events)?;
        }
        Ok(())
    }
}

impl std::fmt::Debug for HookSet<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HookSet")
            .field("hooks", &self.hooks.len())
            .field("text_overrides", &self.text_overrides.keys().collect::<Vec<_>>())
            .finish()
    }
}
