// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic desk-scale scale-wise autoregressive text-to-image engine
//! with training-free style personalization.
//!
//! Modules, bottom up:
//!
//! - [`numerics`]: tensors, matmul, softmax, resampling, hashing, seeded RNG.
//! - [`textenc`]: hash-seeded prompt encoder.
//! - [`quantizer`]: binary spherical quantization of residual features.
//! - [`model`]: the seeded transformer, hook points and generation traces.
//! - [`codec`]: feature decoder, style-image encoder and PPM I/O.
//! - [`interventions`]: plans, attention sharing, query blending, injections, swaps.
//! - [`pipeline`]: three-path lockstep personalization.
//! - [`analysis`]: step-wise influence and Q/K/V swap studies.

pub mod analysis;
pub mod codec;
pub mod error;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod textenc;

pub use codec::{decode, encode_style, read_ppm, write_ppm, Image};
pub use error::{Error, Result};
pub use interventions::{InterventionPlan, PlanOverrides};
pub use model::{GenerationTrace, Model, ModelConfig, ScaleSchedule};
pub use numerics::{FeatureMap, RngStream, TokenMatrix};
pub use pipeline::{
    baseline_generate, personalize, style_aligned_generate, PathId, PersonalizationRequest, TraceBundle,
};
pub use quantizer::{BitGrid, QuantizerConfig, QuantizerMode};
pub use textenc::{encode_prompt, TextEmbedding};
