// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-step generation records.

use serde::{Deserialize, Serialize};

use super::attention::AttentionPacket;
use super::hooks::HookEvent;
use crate::error::{Error, Result};
use crate::numerics::{bilinear_upsample, checksum_hex, FeatureMap};
use crate::quantizer::{quantize, BitGrid};

/// What one forward pass produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: usize,
    pub residual: FeatureMap,
    pub bits: BitGrid,
    pub packets: Vec<AttentionPacket>,
    pub events: Vec<HookEvent>,
    pub max_row_sum_error: f64,
}

/// One step of a [`GenerationTrace`].
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    /// `R_s` at the step resolution. For synthetic steps this holds the
    /// injected features instead of a model prediction.
    pub residual: FeatureMap,
    pub bits: BitGrid,
    /// Set when `accumulated` was overwritten rather than accumulated.
    pub synthetic: bool,
    /// `F_s` at the final resolution.
    pub accumulated: FeatureMap,
    pub events: Vec<HookEvent>,
    pub max_row_sum_error: f64,
    /// Per-layer packets, kept only when retention was requested.
    pub packets: Vec<AttentionPacket>,
}

/// Ordered step records of one path.
#[derive(Debug, Clone, Default)]
pub struct GenerationTrace {
    pub steps: Vec<StepRecord>,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// 1-based step lookup.
    pub fn step(&self, step: usize) -> Option<&StepRecord> {
        step.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    /// `F_S`.
    pub fn final_features(&self) -> Option<&FeatureMap> {
        self.steps.last().map(|s| &s.accumulated)
    }

    pub fn packet(&self, step: usize, layer: usize) -> Option<&AttentionPacket> {
        self.step(step).and_then(|r| r.packets.get(layer))
    }

    pub fn events(&self) -> impl Iterator<Item = &HookEvent> {
        self.steps.iter().flat_map(|s| s.events.iter())
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.steps.iter().map(|s| s.max_row_sum_error).fold(0.0, f64::max)
    }

    pub fn report(&self) -> TraceReport {
        TraceReport { steps: self.steps.iter().map(StepReport::from).collect() }
    }
}

/// Checksum summary of a step, as written to `trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub resolution: (usize, usize),
    pub residual_checksum: String,
    pub bits_checksum: String,
    pub accumulated_checksum: String,
    pub synthetic: bool,
    pub max_row_sum_error: f64,
    pub hooks: Vec<HookEvent>,
}

impl From<&StepRecord> for StepReport {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            resolution: (r.residual.height(), r.residual.width()),
            residual_checksum: checksum_hex(r.residual.checksum()),
            bits_checksum: checksum_hex(r.bits.checksum()),
            accumulated_checksum: checksum_hex(r.accumulated.checksum()),
            synthetic: r.synthetic,
            max_row_sum_error: r.max_row_sum_error,
            hooks: r.events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub steps: Vec<StepReport>,
}

/// Accumulates `F_s = F_{s-1} + up(R_s)` while recording steps.
#[derive(Debug, Clone)]
pub struct TraceBuilder {
    channels: usize,
    height: usize,
    width: usize,
    retain_packets: bool,
    trace: GenerationTrace,
}

impl TraceBuilder {
    pub fn new(channels: usize, final_resolution: (usize, usize), retain_packets: bool) -> Self {
        Self {
            channels,
            height: final_resolution.0,
            width: final_resolution.1,
            retain_packets,
            trace: GenerationTrace::default(),
        }
    }

    /// `F_{s-1}` for the next step; `None` before the first step.
    pub fn current(&self) -> Option<&FeatureMap> {
        self.trace.final_features()
    }

    pub fn next_step(&self) -> usize {
        self.trace.len() + 1
    }

    /// Record a predicted step and accumulate its residual.
    pub fn push(&mut self, out: StepOutput) -> Result<()> {
        self.check_step(out.step)?;
        let up = bilinear_upsample(&out.residual, self.height, self.width)?;
        let accumulated = match self.current() {
            Some(prev) => {
                let mut f = prev.clone();
                f.add_assign(&up)?;
                f
            }
            None => {
                let mut f = FeatureMap::zeros(self.channels, self.height, self.width);
                f.add_assign(&up)?;
                f
            }
        };
        self.record(out, None, accumulated);
        Ok(())
    }

    /// Record a step whose accumulated features are replaced by `features`
    /// (given at the step resolution) instead of accumulating the prediction.
    pub fn push_replaced(&mut self, mut out: StepOutput, features: FeatureMap) -> Result<()> {
        self.check_step(out.step)?;
        if features.channels() != self.channels {
            return Err(Error::invalid(format!(
                "replacement features have {} channels, expected {}",
                features.channels(),
                self.channels
            )));
        }
        let accumulated = bilinear_upsample(&features, self.height, self.width)?;
        let (bits, _) = quantize(&features, self.channels)?;
        out.bits = bits;
        out.events.push(HookEvent::FeatureInit { step: out.step });
        self.record(out, Some(features), accumulated);
        Ok(())
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step != self.next_step() {
            return Err(Error::invalid(format!("trace expects step {}, got {step}", self.next_step())));
        }
        Ok(())
    }

    fn record(&mut self, out: StepOutput, replacement: Option<FeatureMap>, accumulated: FeatureMap) {
        let synthetic = replacement.is_some();
        self.trace.steps.push(StepRecord {
            step: out.step,
            residual: replacement.unwrap_or(out.residual),
            bits: out.bits,
            synthetic,
            accumulated,
            events: out.events,
            max_row_sum_error: out.max_row_sum_error,
            packets: if self.retain_packets { out.packets } else { Vec::new() },
        });
    }

    pub fn finish(self) -> GenerationTrace {
        self.trace
    }

    pub fn trace(&self) -> &GenerationTrace {
        &self.trace
    }
}
