// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded inputs shared by the benchmarks.

use scalewise_core::codec::Image;
use scalewise_core::numerics::{FeatureMap, RngStream, TokenMatrix};

pub fn tokens(seed: u64, n: usize, d: usize) -> TokenMatrix {
    let mut rng = RngStream::new(seed);
    TokenMatrix::new(n, d, (0..n * d).map(|_| rng.next_symmetric()).collect()).expect("shape matches data")
}

pub fn features(seed: u64, channels: usize, side: usize) -> FeatureMap {
    let mut rng = RngStream::new(seed);
    let data = (0..channels * side * side).map(|_| rng.next_symmetric()).collect();
    FeatureMap::new(channels, side, side, data).expect("shape matches data")
}

/// Smooth colour gradient, a typical style reference.
pub fn gradient(side: usize) -> Image {
    let mut img = Image::filled(side, side, [0, 0, 0]);
    let scale = 255.0 / side.max(1) as f32;
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f32 * scale, y as f32 * scale);
            img.set_pixel(y, x, [fx as u8, fy as u8, (255.0 - (fx + fy) / 2.0) as u8]);
        }
    }
    img
}
