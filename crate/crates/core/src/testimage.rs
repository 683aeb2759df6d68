//! The bundled textured test image.
//!
//! A sky gradient with a sun disk above a band of grass-like texture, a
//! brick strip and a sharp horizon: smooth areas, hard edges and stochastic
//! texture in one small frame. Generated procedurally so that it is
//! identical on every platform; `assets/textured.png` is the 64×64
//! rendition quantized to 8 bits.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::ImageBuffer;

pub const TEXTURED_SIDE: usize = 64;

/// The 8-bit PNG rendition of [`textured`] at [`TEXTURED_SIDE`].
pub const TEXTURED_PNG: &[u8] = include_bytes!("../assets/textured.png");

/// The textured scene at `side × side`, values in [0, 1].
pub fn textured(side: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7e47);
    // oriented gratings for the grass band: (fx, fy, phase, weight)
    let waves: Vec<(f64, f64, f64, f64)> = (0..24)
        .map(|_| {
            let period = rng.random_range(2.5..9.0);
            let angle: f64 = rng.random_range(1.2..1.95);
            let f = 1.0 / period;
            (f * angle.cos(), f * angle.sin(), rng.random_range(0.0..TAU), rng.random_range(0.4..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3 * w.3).sum::<f64>().sqrt();
    let s = side as f64;
    ImageBuffer::from_fn(side, side, 3, |x, y, c| {
        let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
        let (px, py) = (u * 64.0, v * 64.0);
        let horizon = 0.42 + 0.04 * (u * 7.0).sin();
        let rgb = if v < horizon {
            let sky = [0.45 + 0.25 * v, 0.62 + 0.2 * v, 0.92 - 0.15 * v];
            let d = ((u - 0.28).powi(2) + (v - 0.2).powi(2)).sqrt();
            if d < 0.11 {
                [0.98, 0.82, 0.35]
            } else {
                sky
            }
        } else if u > 0.62 && v < horizon + 0.18 {
            // bricks with mortar lines
            let row = ((py - horizon * 64.0) / 4.0).floor();
            let shift = if row as i64 % 2 == 0 { 0.0 } else { 3.0 };
            let mortar = (py - horizon * 64.0).rem_euclid(4.0) < 0.8 || (px + shift).rem_euclid(6.0) < 0.8;
            if mortar {
                [0.78, 0.76, 0.72]
            } else {
                [0.62, 0.25, 0.18]
            }
        } else {
            let t: f64 = waves
                .iter()
                .map(|(fx, fy, ph, w)| w * (TAU * (fx * px + fy * py) + ph).sin())
                .sum::<f64>()
                / norm;
            let shade = 0.5 + 0.35 * t;
            [0.18 + 0.2 * shade, 0.35 + 0.4 * shade, 0.1 + 0.12 * shade]
        };
        rgb[c].clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{decode_image, quantize_u8};

    #[test]
    fn bundled_png_matches_generator() {
        let png = decode_image(TEXTURED_PNG).unwrap();
        let gen = textured(TEXTURED_SIDE);
        assert_eq!(png.shape(), gen.shape());
        for (a, b) in png.data().iter().zip(gen.data()) {
            assert_eq!(quantize_u8(*a), quantize_u8(*b));
        }
    }

    #[test]
    fn has_texture_and_flat_regions() {
        let img = textured(64);
        let var = |x0: usize, y0: usize| {
            let vals: Vec<f64> = (0..8).flat_map(|j| (0..8).map(move |i| (i, j))).map(|(i, j)| img.get(x0 + i, y0 + j, 1)).collect();
            let m = vals.iter().sum::<f64>() / 64.0;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 64.0
        };
        assert!(var(4, 50) > 1e-3);
        assert!(var(40, 2) < 1e-3);
    }
}
