// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scaled dot-product attention over per-head Q/K/V matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_transposed, softmax_in_place, TokenMatrix};

/// Which of the three projections a hook targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QkvComponent {
    Q,
    K,
    V,
}

impl QkvComponent {
    pub const ALL: [QkvComponent; 3] = [Self::Q, Self::K, Self::V];
}

impl std::fmt::Display for QkvComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Q => "Q",
            Self::K => "K",
            Self::V => "V",
        })
    }
}

/// One head's post-projection tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadQkv {
    pub q: TokenMatrix,
    pub k: TokenMatrix,
    pub v: TokenMatrix,
}

impl HeadQkv {
    pub fn component(&self, which: QkvComponent) -> &TokenMatrix {
        match which {
            QkvComponent::Q => &self.q,
            QkvComponent::K => &self.k,
            QkvComponent::V => &self.v,
        }
    }

    pub fn component_mut(&mut self, which: QkvComponent) -> &mut TokenMatrix {
        match which {
            QkvComponent::Q => &mut self.q,
            QkvComponent::K => &mut self.k,
            QkvComponent::V => &mut self.v,
        }
    }
}

/// Self-attention inputs for one (step, layer) of one path.
///
/// Queries always cover the step's `N_s` tokens; keys and values may be
/// longer once another path's tokens are concatenated in.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPacket {
    pub step: usize,
    pub layer: usize,
    pub heads: Vec<HeadQkv>,
}

impl AttentionPacket {
    pub fn query_tokens(&self) -> usize {
        self.heads.first().map_or(0, |h| h.q.tokens())
    }

    pub fn kv_tokens(&self) -> usize {
        self.heads.first().map_or(0, |h| h.k.tokens())
    }

    /// All heads' queries concatenated head-major.
    pub fn flat_queries(&self) -> Vec<f32> {
        self.heads.iter().flat_map(|h| h.q.data().iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.heads.first() else {
            return Err(Error::invalid("attention packet has no heads"));
        };
        let (n, d) = (first.q.tokens(), first.q.dim());
        for (i, h) in self.heads.iter().enumerate() {
            if h.q.tokens() != n || h.q.dim() != d || h.k.dim() != d {
                return Err(Error::invalid(format!(
                    "head {i}: query/key shapes inconsistent ({}x{} vs key width {})",
                    h.q.tokens(),
                    h.q.dim(),
                    h.k.dim()
                )));
            }
            if h.k.tokens() != h.v.tokens() {
                return Err(Error::invalid(format!("head {i}: {} keys but {} values", h.k.tokens(), h.v.tokens())));
            }
        }
        Ok(())
    }

    /// Same step, layer and per-head tensor shapes.
    pub fn same_shape(&self, other: &AttentionPacket) -> bool {
        self.step == other.step
            && self.layer == other.layer
            && self.heads.len() == other.heads.len()
            && self.heads.iter().zip(&other.heads).all(|(a, b)| {
                QkvComponent::ALL.iter().all(|&c| {
                    let (x, y) = (a.component(c), b.component(c));
                    x.tokens() == y.tokens() && x.dim() == y.dim()
                })
            })
    }
}

/// Attention weights and output for one head.
#[derive(Debug, Clone)]
pub struct HeadAttention {
    pub weights: TokenMatrix,
    pub output: TokenMatrix,
}

impl HeadAttention {
    /// Largest `|Σ_j p_ij − 1|` over rows, summed in f64.
    pub fn max_row_sum_error(&self) -> f64 {
        let dim = self.weights.dim();
        if dim == 0 {
            return 0.0;
        }
        self.weights
            .data()
            .chunks(dim)
            .map(|row| (row.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `softmax(q·kᵀ / √d)·v` for one head.
pub fn scaled_dot_product(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<HeadAttention> {
    if k.tokens() != v.tokens() {
        return Err(Error::invalid(format!("{} keys but {} values", k.tokens(), v.tokens())));
    }
    if k.tokens() == 0 {
        return Err(Error::invalid("attention over zero keys"));
    }
    let mut scores = matmul_transposed(q, k)?;
    let scale = 1.0 / (q.dim() as f32).sqrt();
    let width = scores.dim();
    for row in scores.data_mut().chunks_mut(width) {
        for s in row.iter_mut() {
            *s *= scale;
        }
        softmax_in_place(row);
    }
    let output = matmul(&scores, v)?;
    Ok(HeadAttention { weights: scores, output })
}
