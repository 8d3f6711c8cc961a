// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary spherical quantizer.
//!
//! Each spatial site carries `c` sign bits, so the implied codebook has
//! `2^c` entries without ever being materialised. A site's code vector is
//! `±1/√c` per channel, which always has unit L2 norm. A value of exactly
//! zero maps to bit 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fnv1a64, FeatureMap, RngStream};

/// Widest code supported by the packed `u64` site words.
pub const MAX_CODE_BITS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerMode {
    /// Bit is 1 iff the logit is non-negative.
    Argmax,
    /// Bit ~ Bernoulli(sigmoid(logit / temperature)).
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub channels: usize,
    pub mode: QuantizerMode,
    pub temperature: f32,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self { channels: 16, mode: QuantizerMode::Argmax, temperature: 1.0 }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CODE_BITS).contains(&self.channels) {
            return Err(Error::invalid(format!(
                "quantizer channels must be in 2..={MAX_CODE_BITS}, got {}",
                self.channels
            )));
        }
        if self.mode == QuantizerMode::Sample && (self.temperature.is_nan() || self.temperature <= 0.0) {
            return Err(Error::invalid(format!("sampling temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// log2 of the implicit codebook size.
    pub fn codebook_bits(&self) -> usize {
        self.channels
    }

    /// Magnitude of every code-vector component.
    pub fn level(&self) -> f32 {
        code_level(self.channels)
    }
}

fn code_level(channels: usize) -> f32 {
    1.0 / (channels as f32).sqrt()
}

/// Per-site packed sign bits; bit `k` of a word is channel `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitGrid {
    channels: usize,
    height: usize,
    width: usize,
    words: Vec<u64>,
}

impl BitGrid {
    pub fn new(channels: usize, height: usize, width: usize, words: Vec<u64>) -> Result<Self> {
        if !(1..=MAX_CODE_BITS).contains(&channels) || words.len() != height * width {
            return Err(Error::invalid(format!("bit grid {channels}x{height}x{width} with {} words", words.len())));
        }
        let mask = if channels == 64 { u64::MAX } else { (1u64 << channels) - 1 };
        if words.iter().any(|w| w & !mask != 0) {
            return Err(Error::invalid("bit grid word has bits beyond the channel count"));
        }
        Ok(Self { channels, height, width, words })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn word(&self, y: usize, x: usize) -> u64 {
        self.words[y * self.width + x]
    }

    pub fn bit(&self, channel: usize, y: usize, x: usize) -> bool {
        self.word(y, x) >> channel & 1 == 1
    }

    /// Code vectors (`±1/√c`) for every site.
    pub fn to_feature_map(&self) -> FeatureMap {
        let level = code_level(self.channels);
        let mut map = FeatureMap::zeros(self.channels, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let w = self.word(y, x);
                for c in 0..self.channels {
                    let v = if w >> c & 1 == 1 { level } else { -level };
                    map.set(c, y, x, v);
                }
            }
        }
        map
    }

    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        fnv1a64(&bytes)
    }
}

fn sign_bits(raw: &FeatureMap) -> BitGrid {
    let (c, h, w) = raw.shape();
    let mut words = vec![0u64; h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if raw.get(ch, y, x) >= 0.0 {
                    words[y * w + x] |= 1 << ch;
                }
            }
        }
    }
    BitGrid { channels: c, height: h, width: w, words }
}

fn check_channels(map: &FeatureMap, channels: usize) -> Result<()> {
    if map.channels() != channels {
        return Err(Error::invalid(format!("quantizer expects {channels} channels, got {}", map.channels())));
    }
    if !(1..=MAX_CODE_BITS).contains(&channels) {
        return Err(Error::invalid(format!("cannot quantize {channels} channels")));
    }
    Ok(())
}

/// Sign-quantize a raw map: returns the bits and the unit-norm code map.
pub fn quantize(raw: &FeatureMap, channels: usize) -> Result<(BitGrid, FeatureMap)> {
    check_channels(raw, channels)?;
    let bits = sign_bits(raw);
    let map = bits.to_feature_map();
    Ok((bits, map))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turn head logits into a quantized residual.
///
/// Sampling draws one uniform per (site, channel) in row-major site order,
/// channel innermost.
pub fn logits_to_residual(
    logits: &FeatureMap,
    cfg: &QuantizerConfig,
    rng: &mut RngStream,
) -> Result<(BitGrid, FeatureMap)> {
    cfg.validate()?;
    match cfg.mode {
        QuantizerMode::Argmax => quantize(logits, cfg.channels),
        QuantizerMode::Sample => {
            check_channels(logits, cfg.channels)?;
            let (c, h, w) = logits.shape();
            let t = f64::from(cfg.temperature);
            let mut words = vec![0u64; h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let p = sigmoid(f64::from(logits.get(ch, y, x)) / t);
                        if rng.next_f64() < p {
                            words[y * w + x] |= 1 << ch;
                        }
                    }
                }
            }
            let bits = BitGrid { channels: c, height: h, width: w, words };
            let map = bits.to_feature_map();
            Ok((bits, map))
        }
    }
}
