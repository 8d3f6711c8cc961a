// SPDX-License-Identifier: MIT OR Apache-2.0

//! Image decoder, style-image encoder and binary PPM I/O.
//!
//! The decoder maps each site's `c` features to three pixel logits through
//! the model's fixed `c × 3` matrix, squashes them with the logistic function
//! and rounds to 8 bits. The style encoder runs that chain backwards per
//! schedule step: average-pool the RGB image to the step grid, take the
//! clamped logit and project back to `c` channels with the decoder's
//! pseudo-inverse.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result, ResultExt};
use crate::model::Model;
use crate::numerics::{area_pool, bilinear_resize, fnv1a64, FeatureMap, TokenMatrix};

/// Probabilities are clamped to `[LOGIT_CLAMP, 1 − LOGIT_CLAMP]` before the logit.
pub const LOGIT_CLAMP: f64 = 1.0 / 512.0;

// ---------------------------------------------------------------------------
// Image
// ---------------------------------------------------------------------------

/// 8-bit RGB image, rows top to bottom, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image must be at least 1x1, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean intensity in `[0, 255]`.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += u64::from(v);
            }
        }
        let n = (self.height * self.width) as f64;
        sums.map(|s| s as f64 / n)
    }

    /// `3 × H × W` map with intensities scaled by `scale`.
    fn to_planes(&self, scale: f32) -> FeatureMap {
        let mut map = FeatureMap::zeros(3, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for (c, v) in self.pixel(y, x).into_iter().enumerate() {
                    map.set(c, y, x, f32::from(v) * scale);
                }
            }
        }
        map
    }

    /// Intensities in `[0, 1]` as a `3 × H × W` map.
    pub fn to_unit_map(&self) -> FeatureMap {
        self.to_planes(1.0 / 255.0)
    }

    pub fn checksum(&self) -> u64 {
        fnv1a64(&self.pixels)
    }
}

/// `floor(v + 0.5)` clamped to `0..=255`.
fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bilinear resampling to `height × width`, rounded half-up back to 8 bits.
pub fn resize_image(img: &Image, height: usize, width: usize) -> Result<Image> {
    if (img.height, img.width) == (height, width) {
        return Ok(img.clone());
    }
    let resized = bilinear_resize(&img.to_planes(1.0), height, width)?;
    let mut pixels = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            pixels.extend((0..3).map(|c| round_half_up(f64::from(resized.get(c, y, x)))));
        }
    }
    Image::new(height, width, pixels)
}

// ---------------------------------------------------------------------------
// Decoder / encoder
// ---------------------------------------------------------------------------

/// Per-site `f · M` for a `c × 3` decoder matrix `M`.
fn pixel_logits(features: &[f32], decoder: &TokenMatrix) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for (c, &f) in features.iter().enumerate() {
        let row = decoder.row(c);
        for (o, &m) in out.iter_mut().zip(row) {
            *o += f * m;
        }
    }
    out
}

/// `D(F)`: project, squash, round half-up.
pub fn decode(features: &FeatureMap, model: &Model) -> Result<Image> {
    let cfg = model.config();
    let (fh, fw) = cfg.schedule.final_resolution();
    if features.channels() != cfg.channels {
        return Err(Error::invalid(format!("decoder expects {} channels, got {}", cfg.channels, features.channels())));
    }
    if (features.height(), features.width()) != (fh, fw) {
        return Err(Error::invalid(format!(
            "decoder expects {fh}x{fw} features, got {}x{}",
            features.height(),
            features.width()
        )));
    }
    let mut pixels = Vec::with_capacity(fh * fw * 3);
    for y in 0..fh {
        for x in 0..fw {
            let logits = pixel_logits(&features.site(y, x), model.decoder());
            pixels.extend(logits.iter().map(|&l| round_half_up(sigmoid(f64::from(l)) * 255.0)));
        }
    }
    Image::new(fh, fw, pixels)
}

/// `E_I`: one feature map per schedule step, at that step's resolution.
pub fn encode_style(img: &Image, model: &Model) -> Result<Vec<FeatureMap>> {
    let schedule = model.schedule();
    let (fh, fw) = schedule.final_resolution();
    if (img.height, img.width) != (fh, fw) {
        return Err(Error::invalid(format!(
            "style image is {}x{}, expected {fh}x{fw}; resample it first",
            img.height, img.width
        )));
    }
    let unit = img.to_unit_map();
    let pinv = model.decoder_pinv();
    let channels = model.config().channels;
    schedule
        .steps
        .iter()
        .map(|&(h, w)| {
            let pooled = area_pool(&unit, h, w)?;
            let mut out = FeatureMap::zeros(channels, h, w);
            for y in 0..h {
                for x in 0..w {
                    let logits: Vec<f32> = pooled
                        .site(y, x)
                        .iter()
                        .map(|&p| {
                            let p = f64::from(p).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                            (p / (1.0 - p)).ln() as f32
                        })
                        .collect();
                    let mut feat = vec![0.0f32; channels];
                    for (j, &l) in logits.iter().enumerate() {
                        for (f, &p) in feat.iter_mut().zip(pinv.row(j)) {
                            *f += l * p;
                        }
                    }
                    for (c, v) in feat.into_iter().enumerate() {
                        out.set(c, y, x, v);
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PPM
// ---------------------------------------------------------------------------

/// Serialize as binary PPM (`P6`, maxval 255).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parse a binary PPM. Comments (`#` to end of line) are allowed in the header.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::format(format!("expected P6 magic, found {:?}", String::from_utf8_lossy(magic))));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(format!("degenerate {width}x{height} image")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("missing whitespace after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::format(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(Error::format(format!("{} trailing bytes after payload", payload.len() - need)));
    }
    Image::new(height, width, payload.to_vec())
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b == b'#' {
            while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(Error::from).context_with(|| path.display())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::from).context_with(|| path.display())?;
    decode_ppm(&bytes).context_with(|| path.display())
}
