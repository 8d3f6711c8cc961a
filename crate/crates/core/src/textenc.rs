// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic prompt encoder.
//!
//! Stands in for a pretrained text encoder: each lowercase whitespace token
//! is embedded by seeding an [`RngStream`] with the token's FNV-1a hash, and a
//! fixed sinusoidal position vector is added. Row 0 is always the
//! start-of-sequence row (the hash of the empty string).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fnv1a64, RngStream, TokenMatrix};

/// Maximum sequence length, start-of-sequence row included.
pub const MAX_PROMPT_TOKENS: usize = 64;

/// Smallest accepted embedding width.
pub const MIN_TEXT_DIM: usize = 8;

/// `L × d_text` prompt embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    rows: TokenMatrix,
}

impl TextEmbedding {
    pub fn from_matrix(rows: TokenMatrix) -> Result<Self> {
        if rows.tokens() == 0 || rows.tokens() > MAX_PROMPT_TOKENS {
            return Err(Error::invalid(format!(
                "text embedding needs 1..={MAX_PROMPT_TOKENS} rows, got {}",
                rows.tokens()
            )));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.tokens()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.rows.dim()
    }

    pub fn matrix(&self) -> &TokenMatrix {
        &self.rows
    }
}

/// Lowercased whitespace tokens, truncated to fit after the start row.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_lowercase).take(MAX_PROMPT_TOKENS - 1).collect()
}

fn positional(pos: usize, dim: usize) -> impl Iterator<Item = f32> {
    (0..dim).map(move |i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    })
}

fn embed_token(token: &str, pos: usize, dim: usize, out: &mut Vec<f32>) {
    let mut rng = RngStream::new(fnv1a64(token.as_bytes()));
    out.extend(positional(pos, dim).map(|p| rng.next_symmetric() + p));
}

/// Encode a prompt into a `(1 + tokens) × d_text` embedding.
pub fn encode_prompt(prompt: &str, d_text: usize) -> Result<TextEmbedding> {
    if d_text < MIN_TEXT_DIM {
        return Err(Error::invalid(format!("text embedding width must be at least {MIN_TEXT_DIM}, got {d_text}")));
    }
    let tokens = tokenize(prompt);
    let mut data = Vec::with_capacity((tokens.len() + 1) * d_text);
    embed_token("", 0, d_text, &mut data);
    for (i, tok) in tokens.iter().enumerate() {
        embed_token(tok, i + 1, d_text, &mut data);
    }
    TextEmbedding::from_matrix(TokenMatrix::new(tokens.len() + 1, d_text, data)?)
}

/// Compose the generation prompt `"<content> in <style>"`.
pub fn build_gen_prompt(content: &str, style: &str) -> Result<String> {
    if content.trim().is_empty() || style.trim().is_empty() {
        return Err(Error::invalid("content and style prompts must be non-empty"));
    }
    Ok(format!("{content} in {style}"))
}
