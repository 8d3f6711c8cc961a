// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal deterministic tensor kernel.
//!
//! Everything here works on 32-bit floats with a fixed summation order so
//! that identical inputs produce bit-identical outputs on every run. The two
//! containers are [`FeatureMap`] (a `c × h × w` grid, channel-major) and
//! [`TokenMatrix`] (an `N × d` row-major matrix of token vectors).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// FNV-1a over the little-endian bytes of a float slice.
pub fn checksum_f32(data: &[f32]) -> u64 {
    data.iter().fold(FNV_OFFSET, |h, v| fnv1a64_extend(h, &v.to_le_bytes()))
}

/// Render a checksum the way reports print it.
pub fn checksum_hex(sum: u64) -> String {
    format!("{sum:016x}")
}

// ---------------------------------------------------------------------------
// RngStream
// ---------------------------------------------------------------------------

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream. Identical seeds give identical sequences everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for a named consumer of a shared seed.
    pub fn derive(seed: u64, name: &str) -> Self {
        Self::new(mix64(seed ^ fnv1a64(name.as_bytes())))
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of mantissa.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[-1, 1)`.
    #[inline]
    pub fn next_symmetric(&mut self) -> f32 {
        (2.0 * self.next_f64() - 1.0) as f32
    }

    /// Pure form of [`RngStream::next_f64`]: returns the draw and the advanced stream.
    pub fn advance(self) -> (f64, Self) {
        let mut next = self;
        let v = next.next_f64();
        (v, next)
    }
}

// ---------------------------------------------------------------------------
// FeatureMap
// ---------------------------------------------------------------------------

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Dense `channels × height × width` grid stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        check_finite(&data, "feature map")?;
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    /// The `channels`-long vector at one spatial site.
    pub fn site(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!("cannot add {:?} to {:?}", other.shape(), self.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn checksum(&self) -> u64 {
        checksum_f32(&self.data)
    }
}

// ---------------------------------------------------------------------------
// TokenMatrix
// ---------------------------------------------------------------------------

/// Row-major `tokens × dim` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != tokens * dim {
            return Err(Error::invalid(format!(
                "token matrix {tokens}x{dim} needs {} values, got {}",
                tokens * dim,
                data.len()
            )));
        }
        check_finite(&data, "token matrix")?;
        Ok(Self { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Self {
        Self { tokens, dim, data: vec![0.0; tokens * dim] }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub(crate) fn from_raw(tokens: usize, dim: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), tokens * dim);
        Self { tokens, dim, data }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.dim + j]
    }

    pub fn transpose(&self) -> TokenMatrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.tokens {
            for j in 0..self.dim {
                out[j * self.tokens + i] = self.data[i * self.dim + j];
            }
        }
        TokenMatrix::from_raw(self.dim, self.tokens, out)
    }

    /// Stack `self` on top of `other` along the token axis.
    pub fn concat_tokens(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        if self.dim != other.dim {
            return Err(Error::invalid(format!("cannot concatenate tokens of width {} and {}", self.dim, other.dim)));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(TokenMatrix::from_raw(self.tokens + other.tokens, self.dim, data))
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> TokenMatrix {
        let mut data = Vec::with_capacity(self.tokens * width);
        for i in 0..self.tokens {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        TokenMatrix::from_raw(self.tokens, width, data)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &TokenMatrix) -> Result<()> {
        if (self.tokens, self.dim) != (other.tokens, other.dim) {
            return Err(Error::invalid(format!(
                "cannot add {}x{} to {}x{}",
                other.tokens, other.dim, self.tokens, self.dim
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        checksum_f32(&self.data)
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// `a · b` for `a: N×K`, `b: K×M`.
///
/// Each output element is accumulated as `0 + a[i,0]·b[0,j] + a[i,1]·b[1,j] + …`
/// in ascending `k`, which is the order of a naive triple loop. The loop nest is
/// i-k-j so the innermost loop runs over contiguous memory.
pub fn matmul(a: &TokenMatrix, b: &TokenMatrix) -> Result<TokenMatrix> {
    if a.dim != b.tokens {
        return Err(Error::invalid(format!(
            "matmul inner dimensions differ: {}x{} by {}x{}",
            a.tokens, a.dim, b.tokens, b.dim
        )));
    }
    let (n, k_len, m) = (a.tokens, a.dim, b.dim);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a.data[i * k_len..(i + 1) * k_len];
        for (k, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(TokenMatrix::from_raw(n, m, out))
}

/// `a · bᵀ` for `a: N×K`, `b: M×K`; same summation order as [`matmul`].
pub fn matmul_transposed(a: &TokenMatrix, b: &TokenMatrix) -> Result<TokenMatrix> {
    if a.dim != b.dim {
        return Err(Error::invalid(format!(
            "matmul inner dimensions differ: {}x{} by ({}x{})ᵀ",
            a.tokens, a.dim, b.tokens, b.dim
        )));
    }
    matmul(a, &b.transpose())
}

// ---------------------------------------------------------------------------
// Softmax and similarity
// ---------------------------------------------------------------------------

/// Max-subtracted softmax over one row, normalised with a 64-bit sum.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += f64::from(*v);
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (f64::from(*v) * inv) as f32;
    }
}

/// Row-wise softmax.
pub fn softmax_rows(m: &TokenMatrix) -> TokenMatrix {
    let mut out = m.clone();
    if out.dim > 0 {
        for row in out.data.chunks_mut(out.dim) {
            softmax_in_place(row);
        }
    }
    out
}

/// Cosine similarity in `[-1, 1]`; 0 when either vector has (near-)zero norm.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("cosine similarity needs equal lengths, got {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) as f32)
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Per-output-index source taps `(lo, hi, t)` for half-pixel-centre sampling.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let t = if lo == hi { 0.0 } else { (x - lo as f64) as f32 };
            (lo, hi, t)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear resampling to any size (align-corners-false, border clamped).
///
/// Interpolation is written as `a + t·(b − a)`, so constant fields are
/// reproduced exactly and equal-size resampling is an exact copy.
pub fn bilinear_resize(src: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || width == 0 || src.height == 0 || src.width == 0 {
        return Err(Error::invalid(format!("cannot resample {}x{} to {height}x{width}", src.height, src.width)));
    }
    let ys = bilinear_taps(src.height, height);
    let xs = bilinear_taps(src.width, width);
    let mut out = Vec::with_capacity(src.channels * height * width);
    for c in 0..src.channels {
        let plane = &src.data[c * src.height * src.width..(c + 1) * src.height * src.width];
        for &(y0, y1, ty) in &ys {
            let r0 = &plane[y0 * src.width..(y0 + 1) * src.width];
            let r1 = &plane[y1 * src.width..(y1 + 1) * src.width];
            for &(x0, x1, tx) in &xs {
                let top = lerp(r0[x0], r0[x1], tx);
                let bottom = lerp(r1[x0], r1[x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    Ok(FeatureMap { channels: src.channels, height, width, data: out })
}

/// Bilinear upsampling; the target may not be smaller than the source.
pub fn bilinear_upsample(src: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height < src.height || width < src.width {
        return Err(Error::invalid(format!(
            "upsample target {height}x{width} is smaller than source {}x{}",
            src.height, src.width
        )));
    }
    bilinear_resize(src, height, width)
}

/// Adaptive average pooling: output cell `(i, j)` averages source rows
/// `⌊iH/h⌋..⌈(i+1)H/h⌉` and the analogous columns. Sums run in f64, so a
/// constant field pools to exactly the same constant.
pub fn area_pool(src: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || width == 0 || src.height == 0 || src.width == 0 {
        return Err(Error::invalid(format!("cannot pool {}x{} to {height}x{width}", src.height, src.width)));
    }
    let window =
        |i: usize, src_len: usize, dst_len: usize| (i * src_len / dst_len, ((i + 1) * src_len).div_ceil(dst_len));
    let mut out = Vec::with_capacity(src.channels * height * width);
    for c in 0..src.channels {
        for oy in 0..height {
            let (y0, y1) = window(oy, src.height, height);
            for ox in 0..width {
                let (x0, x1) = window(ox, src.width, width);
                let mut sum = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += f64::from(src.get(c, y, x));
                    }
                }
                out.push((sum / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    Ok(FeatureMap { channels: src.channels, height, width, data: out })
}
