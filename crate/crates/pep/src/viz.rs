//! Detection overlays: each instance gets a stable color, a solid contour,
//! and a translucent fill on top of the input image.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::data::encode_image;
use crate::error::Result;

/// Fill opacity; contours are drawn solid.
const FILL: f64 = 0.4;

/// Deterministic per-instance color: hues step around the wheel by the
/// golden-ratio conjugate so neighboring indices stay far apart.
pub fn instance_color(index: usize) -> [f64; 3] {
    let hue = (index as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.85, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn is_contour(mask: &Array2<bool>, r: usize, c: usize) -> bool {
    let (h, w) = mask.dim();
    let neighbors = [
        (r.wrapping_sub(1), c),
        (r + 1, c),
        (r, c.wrapping_sub(1)),
        (r, c + 1),
    ];
    neighbors
        .iter()
        .any(|&(nr, nc)| nr >= h || nc >= w || !mask[[nr, nc]])
}

/// Paints masks over a copy of the image, in order; later masks draw on top.
/// Masks must match the image resolution.
pub fn overlay(image: &Array3<f64>, masks: &[Array2<bool>]) -> Array3<f64> {
    let (_, h, w) = image.dim();
    let mut out = image.clone();
    for (k, mask) in masks.iter().enumerate() {
        assert_eq!(mask.dim(), (h, w), "mask resolution must match the image");
        let color = instance_color(k);
        for r in 0..h {
            for c in 0..w {
                if !mask[[r, c]] {
                    continue;
                }
                let a = if is_contour(mask, r, c) { 1.0 } else { FILL };
                for ch in 0..3 {
                    out[[ch, r, c]] = (1.0 - a) * out[[ch, r, c]] + a * color[ch];
                }
            }
        }
    }
    out
}

pub fn save_overlay(path: &Path, image: &Array3<f64>, masks: &[Array2<bool>]) -> Result<()> {
    encode_image(&overlay(image, masks), path)
}
