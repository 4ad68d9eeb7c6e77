// SPDX-License-Identifier: MIT OR Apache-2.0

//! Signed heatmaps: gray at zero, warm for positive, cool for negative,
//! normalized by the largest magnitude.

use dave_core::Tensor;

use crate::ppm::Ppm;

const NEUTRAL: [f64; 3] = [128.0, 128.0, 128.0];
const WARM: [f64; 3] = [255.0, 32.0, 0.0];
const COOL: [f64; 3] = [0.0, 64.0, 255.0];

/// Renders an `[H, W]` map.
pub fn heatmap(map: &Tensor) -> Ppm {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let scale = map.max_abs();
    let mut pixels = Vec::with_capacity(3 * h * w);
    for &v in map.data() {
        let t = if scale > 0.0 { v / scale } else { 0.0 };
        let target = if t >= 0.0 { WARM } else { COOL };
        let a = t.abs();
        for c in 0..3 {
            pixels.push((NEUTRAL[c] + a * (target[c] - NEUTRAL[c])).round() as u8);
        }
    }
    Ppm {
        width: w,
        height: h,
        pixels,
    }
}
