//! Fixed multi-scale filter-bank features and their adjoint.
//!
//! Every pyramid level carries six luminance channels: the luminance itself,
//! a difference of Gaussians (σ = 1 minus σ = 2) and four oriented
//! first-derivative-of-Gaussian responses (0°, 45°, 90°, 135°, σ = 1). The
//! band-pass responses go through the smooth rectifier
//! `sqrt(x² + ε²) − ε`. Level 0 of a color image additionally carries the
//! two chroma differences `B − Y` and `R − Y`. Level `ℓ` is the luminance
//! area-downsampled by `2^ℓ`; all filtering is correlation with reflect
//! (mirror, edge not repeated) padding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_io::ImageBuffer;

/// Rec. 601 luma weights applied to sRGB-encoded samples.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("image {width}x{height} too small for {levels} pyramid levels (need {min} per side)")]
    TooSmall {
        width: usize,
        height: usize,
        levels: usize,
        min: usize,
    },
    #[error("feature extraction needs 1 or 3 channels, got {0}")]
    BadChannels(usize),
    #[error("feature gradient shape does not match the extractor output")]
    ShapeMismatch,
    #[error("invalid filter bank: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterBankSpec {
    pub num_levels: usize,
    /// Center and surround widths of the difference of Gaussians.
    pub dog_sigmas: [f64; 2],
    pub derivative_sigma: f64,
    /// Orientations of the derivative filters, in degrees.
    pub orientations_deg: Vec<f64>,
    pub rectifier_eps: f64,
    /// Disabling the rectifier makes the extractor linear.
    pub rectify: bool,
    pub include_chroma: bool,
    /// Common gain applied to every output channel.
    pub gain: f64,
}

impl Default for FilterBankSpec {
    fn default() -> Self {
        Self {
            num_levels: 3,
            dog_sigmas: [1.0, 2.0],
            derivative_sigma: 1.0,
            orientations_deg: vec![0.0, 45.0, 90.0, 135.0],
            rectifier_eps: 1e-3,
            rectify: true,
            include_chroma: true,
            gain: 1.0,
        }
    }
}

impl FilterBankSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.num_levels == 0 {
            return Err(FeatureError::InvalidSpec("num_levels must be ≥ 1".into()));
        }
        if !(self.dog_sigmas[0] > 0.0 && self.dog_sigmas[1] > 0.0 && self.derivative_sigma > 0.0) {
            return Err(FeatureError::InvalidSpec("filter widths must be > 0".into()));
        }
        if !(self.rectifier_eps > 0.0) {
            return Err(FeatureError::InvalidSpec("rectifier_eps must be > 0".into()));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(FeatureError::InvalidSpec("gain must be > 0".into()));
        }
        Ok(())
    }

    /// Luminance-derived channels per level.
    pub fn luminance_channels(&self) -> usize {
        2 + self.orientations_deg.len()
    }

    /// Channel count of `level` for an input with `image_channels` channels.
    pub fn channels_at(&self, level: usize, image_channels: usize) -> usize {
        let chroma = level == 0 && image_channels == 3 && self.include_chroma;
        self.luminance_channels() + if chroma { 2 } else { 0 }
    }

    /// Smallest admissible image side.
    pub fn min_side(&self) -> usize {
        1 << self.num_levels
    }

    fn rect(&self, x: f64) -> f64 {
        if self.rectify {
            (x * x + self.rectifier_eps * self.rectifier_eps).sqrt() - self.rectifier_eps
        } else {
            x
        }
    }

    fn rect_grad(&self, x: f64) -> f64 {
        if self.rectify {
            x / (x * x + self.rectifier_eps * self.rectifier_eps).sqrt()
        } else {
            1.0
        }
    }

    /// Dense 2D correlation kernel of luminance channel `ch` (1 = DoG,
    /// 2.. = oriented derivatives), as `(radius, row-major taps)`.
    pub fn kernel_2d(&self, ch: usize) -> (usize, Vec<f64>) {
        let outer = |a: &[f64], b: &[f64]| -> Vec<f64> {
            // a along x, b along y
            let mut k = vec![0.0; a.len() * b.len()];
            for (j, bj) in b.iter().enumerate() {
                for (i, ai) in a.iter().enumerate() {
                    k[j * a.len() + i] = ai * bj;
                }
            }
            k
        };
        let pad = |k: &[f64], r: usize, to: usize| -> Vec<f64> {
            let side = 2 * r + 1;
            let big = 2 * to + 1;
            let mut out = vec![0.0; big * big];
            let off = to - r;
            for y in 0..side {
                for x in 0..side {
                    out[(y + off) * big + x + off] = k[y * side + x];
                }
            }
            out
        };
        match ch {
            1 => {
                let g1 = gaussian_kernel(self.dog_sigmas[0]);
                let g2 = gaussian_kernel(self.dog_sigmas[1]);
                let (r1, r2) = (g1.len() / 2, g2.len() / 2);
                let r = r1.max(r2);
                let a = pad(&outer(&g1, &g1), r1, r);
                let b = pad(&outer(&g2, &g2), r2, r);
                (r, a.iter().zip(&b).map(|(x, y)| x - y).collect())
            }
            c if c >= 2 && c < self.luminance_channels() => {
                let theta = self.orientations_deg[c - 2].to_radians();
                let g = gaussian_kernel(self.derivative_sigma);
                let d = derivative_kernel(self.derivative_sigma);
                let kx = outer(&d, &g);
                let ky = outer(&g, &d);
                let (s, c) = theta.sin_cos();
                (g.len() / 2, kx.iter().zip(&ky).map(|(x, y)| c * x + s * y).collect())
            }
            _ => (0, vec![1.0]),
        }
    }
}

/// Normalized Gaussian taps on `[-⌈3σ⌉, ⌈3σ⌉]`; `σ = 0` gives the identity.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Derivative-of-Gaussian taps scaled so a unit ramp responds with 1.
pub fn derivative_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let g = |k: isize| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-r..=r).map(|k| (k * k) as f64 * g(k)).sum();
    (-r..=r).map(|k| k as f64 * g(k) / norm).collect()
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Correlation along rows (`axis = 0`) or columns (`axis = 1`).
pub(crate) fn correlate(src: &[f64], w: usize, h: usize, kernel: &[f64], axis: usize) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut dst = vec![0.0; w * h];
    if axis == 0 {
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * row[reflect(x as isize + k as isize - r, w)];
                }
                dst[y * w + x] = acc;
            }
        }
    } else {
        for y in 0..h {
            for (k, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                let (s, d) = (&src[sy * w..(sy + 1) * w], &mut dst[y * w..(y + 1) * w]);
                for x in 0..w {
                    d[x] += kv * s[x];
                }
            }
        }
    }
    dst
}

/// Exact adjoint of [`correlate`].
pub(crate) fn correlate_adjoint(
    grad: &[f64],
    w: usize,
    h: usize,
    kernel: &[f64],
    axis: usize,
) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    if axis == 0 {
        for y in 0..h {
            for x in 0..w {
                let g = grad[y * w + x];
                for (k, kv) in kernel.iter().enumerate() {
                    out[y * w + reflect(x as isize + k as isize - r, w)] += kv * g;
                }
            }
        }
    } else {
        for y in 0..h {
            for (k, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                for x in 0..w {
                    out[sy * w + x] += kv * grad[y * w + x];
                }
            }
        }
    }
    out
}

/// Separable correlation: `kx` along rows, then `ky` along columns.
pub(crate) fn correlate2(src: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    correlate(&correlate(src, w, h, kx, 0), w, h, ky, 1)
}

pub(crate) fn correlate2_adjoint(grad: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    correlate_adjoint(&correlate_adjoint(grad, w, h, ky, 1), w, h, kx, 0)
}

/// 2×2 box average; a trailing odd row or column is dropped.
pub(crate) fn downsample2(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (dw, dh) = (w / 2, h / 2);
    let mut out = vec![0.0; dw * dh];
    for y in 0..dh {
        for x in 0..dw {
            let (sx, sy) = (2 * x, 2 * y);
            out[y * dw + x] = 0.25
                * (src[sy * w + sx]
                    + src[sy * w + sx + 1]
                    + src[(sy + 1) * w + sx]
                    + src[(sy + 1) * w + sx + 1]);
        }
    }
    (out, dw, dh)
}

/// Adjoint of [`downsample2`] onto a `w × h` source.
pub(crate) fn downsample2_adjoint(grad: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (dw, dh) = (w / 2, h / 2);
    let mut out = vec![0.0; w * h];
    for y in 0..dh {
        for x in 0..dw {
            let g = 0.25 * grad[y * dw + x];
            let (sx, sy) = (2 * x, 2 * y);
            out[sy * w + sx] += g;
            out[sy * w + sx + 1] += g;
            out[(sy + 1) * w + sx] += g;
            out[(sy + 1) * w + sx + 1] += g;
        }
    }
    out
}

/// One pyramid level, channel-planar (`data[c·h·w + y·w + x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }
}

/// Multi-level features; level 0 has the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub levels: Vec<FeatureMap>,
}

impl FeatureStack {
    /// A zero stack with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| FeatureMap::zeros(l.width, l.height, l.channels))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &FeatureStack) -> bool {
        self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| a.same_shape(b))
    }
}

/// Pre-rectification responses kept for the reverse pass.
pub(crate) struct Tape {
    image_channels: usize,
    width: usize,
    height: usize,
    /// Per level: band-pass responses before rectification (DoG, then
    /// orientations), each `w·h`.
    responses: Vec<Vec<Vec<f64>>>,
}

struct Kernels {
    g1: Vec<f64>,
    g2: Vec<f64>,
    gd: Vec<f64>,
    d: Vec<f64>,
    dirs: Vec<(f64, f64)>,
}

impl Kernels {
    fn new(spec: &FilterBankSpec) -> Self {
        Self {
            g1: gaussian_kernel(spec.dog_sigmas[0]),
            g2: gaussian_kernel(spec.dog_sigmas[1]),
            gd: gaussian_kernel(spec.derivative_sigma),
            d: derivative_kernel(spec.derivative_sigma),
            dirs: spec
                .orientations_deg
                .iter()
                .map(|a| {
                    let (s, c) = a.to_radians().sin_cos();
                    (c, s)
                })
                .collect(),
        }
    }
}

fn check_input(img: &ImageBuffer, spec: &FilterBankSpec) -> Result<(), FeatureError> {
    spec.validate()?;
    if img.channels() != 1 && img.channels() != 3 {
        return Err(FeatureError::BadChannels(img.channels()));
    }
    let min = spec.min_side();
    if img.width() < min || img.height() < min {
        return Err(FeatureError::TooSmall {
            width: img.width(),
            height: img.height(),
            levels: spec.num_levels,
            min,
        });
    }
    Ok(())
}

pub fn extract(img: &ImageBuffer, spec: &FilterBankSpec) -> Result<FeatureStack, FeatureError> {
    extract_taped(img, spec).map(|(f, _)| f)
}

pub(crate) fn extract_taped(
    img: &ImageBuffer,
    spec: &FilterBankSpec,
) -> Result<(FeatureStack, Tape), FeatureError> {
    check_input(img, spec)?;
    let k = Kernels::new(spec);
    let (mut w, mut h) = (img.width(), img.height());
    let mut lum: Vec<f64> = if img.channels() == 3 {
        img.data()
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    } else {
        img.data().to_vec()
    };
    let mut levels = Vec::with_capacity(spec.num_levels);
    let mut responses = Vec::with_capacity(spec.num_levels);
    for level in 0..spec.num_levels {
        if level > 0 {
            let (d, dw, dh) = downsample2(&lum, w, h);
            lum = d;
            w = dw;
            h = dh;
        }
        let channels = spec.channels_at(level, img.channels());
        let mut map = FeatureMap::zeros(w, h, channels);
        map.plane_mut(0).copy_from_slice(&lum);

        let c1 = correlate2(&lum, w, h, &k.g1, &k.g1);
        let c2 = correlate2(&lum, w, h, &k.g2, &k.g2);
        let dog: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a - b).collect();
        let rx = correlate2(&lum, w, h, &k.d, &k.gd);
        let ry = correlate2(&lum, w, h, &k.gd, &k.d);
        let mut resp = Vec::with_capacity(1 + k.dirs.len());
        resp.push(dog);
        for &(c, s) in &k.dirs {
            resp.push(rx.iter().zip(&ry).map(|(a, b)| c * a + s * b).collect());
        }
        for (i, r) in resp.iter().enumerate() {
            for (o, v) in map.plane_mut(1 + i).iter_mut().zip(r) {
                *o = spec.rect(*v);
            }
        }
        if channels > spec.luminance_channels() {
            let base = spec.luminance_channels();
            let n = w * h;
            for (i, p) in img.data().chunks_exact(3).enumerate() {
                let y = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
                map.data[base * n + i] = p[2] - y;
                map.data[(base + 1) * n + i] = p[0] - y;
            }
        }
        if spec.gain != 1.0 {
            for v in &mut map.data {
                *v *= spec.gain;
            }
        }
        levels.push(map);
        responses.push(resp);
    }
    Ok((
        FeatureStack { levels },
        Tape {
            image_channels: img.channels(),
            width: img.width(),
            height: img.height(),
            responses,
        },
    ))
}

/// Reverse pass of [`extract`]: maps `∂L/∂features` to `∂L/∂image`.
pub fn extract_backward(
    img: &ImageBuffer,
    spec: &FilterBankSpec,
    upstream: &FeatureStack,
) -> Result<ImageBuffer, FeatureError> {
    let (features, tape) = extract_taped(img, spec)?;
    if !features.same_shape(upstream) {
        return Err(FeatureError::ShapeMismatch);
    }
    Ok(backward_from_tape(&tape, spec, upstream))
}

pub(crate) fn backward_from_tape(tape: &Tape, spec: &FilterBankSpec, upstream: &FeatureStack) -> ImageBuffer {
    if spec.gain != 1.0 {
        let mut scaled = upstream.clone();
        for l in &mut scaled.levels {
            for v in &mut l.data {
                *v *= spec.gain;
            }
        }
        let spec = FilterBankSpec { gain: 1.0, ..spec.clone() };
        return backward_from_tape(tape, &spec, &scaled);
    }
    let k = Kernels::new(spec);
    let mut carry: Option<Vec<f64>> = None;
    for level in (0..upstream.levels.len()).rev() {
        let g = &upstream.levels[level];
        let (w, h) = (g.width, g.height);
        let resp = &tape.responses[level];
        let mut g_lum = g.plane(0).to_vec();
        if let Some(c) = carry.take() {
            for (a, b) in g_lum.iter_mut().zip(c) {
                *a += b;
            }
        }
        let pre = |i: usize| -> Vec<f64> {
            g.plane(1 + i)
                .iter()
                .zip(&resp[i])
                .map(|(gv, x)| gv * spec.rect_grad(*x))
                .collect()
        };
        let g_dog = pre(0);
        let a1 = correlate2_adjoint(&g_dog, w, h, &k.g1, &k.g1);
        let a2 = correlate2_adjoint(&g_dog, w, h, &k.g2, &k.g2);
        let mut g_rx = vec![0.0; w * h];
        let mut g_ry = vec![0.0; w * h];
        for (i, &(c, s)) in k.dirs.iter().enumerate() {
            for ((gx, gy), gv) in g_rx.iter_mut().zip(g_ry.iter_mut()).zip(pre(1 + i)) {
                *gx += c * gv;
                *gy += s * gv;
            }
        }
        let ax = correlate2_adjoint(&g_rx, w, h, &k.d, &k.gd);
        let ay = correlate2_adjoint(&g_ry, w, h, &k.gd, &k.d);
        for i in 0..w * h {
            g_lum[i] += a1[i] - a2[i] + ax[i] + ay[i];
        }
        carry = Some(if level > 0 {
            let up = &upstream.levels[level - 1];
            downsample2_adjoint(&g_lum, up.width, up.height)
        } else {
            g_lum
        });
    }
    let g_lum = carry.unwrap_or_default();
    let (w, h) = (tape.width, tape.height);
    if tape.image_channels == 1 {
        return ImageBuffer::new(w, h, 1, g_lum).expect("gradient shape");
    }
    let level0 = &upstream.levels[0];
    let chroma = level0.channels > spec.luminance_channels();
    let base = spec.luminance_channels();
    let mut out = Vec::with_capacity(w * h * 3);
    for (i, gl) in g_lum.iter().enumerate() {
        let (gu, gv) = if chroma {
            (level0.plane(base)[i], level0.plane(base + 1)[i])
        } else {
            (0.0, 0.0)
        };
        // Y = luma·rgb, U = B − Y, V = R − Y
        let gy = gl - gu - gv;
        out.push(LUMA[0] * gy + gv);
        out.push(LUMA[1] * gy);
        out.push(LUMA[2] * gy + gu);
    }
    ImageBuffer::new(w, h, 3, out).expect("gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, c, |_, _, _| rng.random())
    }

    #[test]
    fn kernels_have_specified_sums() {
        let spec = FilterBankSpec::default();
        for ch in 1..spec.luminance_channels() {
            let (_, k) = spec.kernel_2d(ch);
            assert!(k.iter().sum::<f64>().abs() < 1e-10, "channel {ch}");
        }
        assert!((gaussian_kernel(1.5).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflect_bounces() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(9, 1), 0);
        for i in -20..20 {
            assert!(reflect(i, 4) < 4);
        }
    }

    #[test]
    fn constant_image_has_zero_band_pass() {
        let spec = FilterBankSpec::default();
        let img = ImageBuffer::from_fn(32, 24, 3, |_, _, c| [0.2, 0.5, 0.7][c]);
        let f = extract(&img, &spec).unwrap();
        let y = 0.299 * 0.2 + 0.587 * 0.5 + 0.114 * 0.7;
        for (l, map) in f.levels.iter().enumerate() {
            assert!(map.plane(0).iter().all(|v| (v - y).abs() < 1e-12));
            for c in 1..spec.luminance_channels() {
                assert!(map.plane(c).iter().all(|v| v.abs() < 1e-12), "level {l} ch {c}");
            }
        }
        let gray = ImageBuffer::filled(16, 16, 1, 0.4);
        let f = extract(&gray, &spec).unwrap();
        assert_eq!(f.levels[0].channels, 6);
        assert!(f.levels[0].plane(0).iter().all(|&v| v == 0.4));
    }

    #[test]
    fn level_shapes() {
        let spec = FilterBankSpec::default();
        let f = extract(&random_image(37, 20, 3, 1), &spec).unwrap();
        let dims: Vec<_> = f.levels.iter().map(|l| (l.width, l.height, l.channels)).collect();
        assert_eq!(dims, vec![(37, 20, 8), (18, 10, 6), (9, 5, 6)]);
        assert!(matches!(
            extract(&random_image(7, 20, 3, 1), &spec),
            Err(FeatureError::TooSmall { .. })
        ));
    }

    #[test]
    fn horizontal_edge_excites_vertical_derivative() {
        let spec = FilterBankSpec::default();
        let img = ImageBuffer::from_fn(24, 24, 1, |_, y, _| if y < 12 { 0.2 } else { 0.8 });
        let f = extract(&img, &spec).unwrap();
        let l0 = &f.levels[0];
        // channels: 2 = 0°, 4 = 90°
        for x in 0..24 {
            for y in [11, 12] {
                let i = y * 24 + x;
                assert!(l0.plane(4)[i] > l0.plane(2)[i] + 0.1);
            }
        }
    }

    #[test]
    fn deterministic_and_translation_covariant() {
        let spec = FilterBankSpec::default();
        let img = random_image(40, 40, 3, 3);
        assert_eq!(extract(&img, &spec).unwrap(), extract(&img, &spec).unwrap());
        let shifted = ImageBuffer::from_fn(40, 40, 3, |x, y, c| img.get((x + 3) % 40, (y + 2) % 40, c));
        let a = extract(&img, &spec).unwrap();
        let b = extract(&shifted, &spec).unwrap();
        let (la, lb) = (&a.levels[0], &b.levels[0]);
        for c in 0..la.channels {
            for y in 8..28 {
                for x in 8..28 {
                    let va = la.plane(c)[(y + 2) * 40 + x + 3];
                    let vb = lb.plane(c)[y * 40 + x];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_response_is_lipschitz_in_max_norm() {
        let spec = FilterBankSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(32, 32, 3, 4);
        let delta = 0.01;
        let pert = ImageBuffer::from_fn(32, 32, 3, |x, y, c| img.get(x, y, c) + rng.random_range(-delta..delta));
        let a = extract(&img, &spec).unwrap();
        let b = extract(&pert, &spec).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            for c in 0..la.channels {
                let gain = if c < spec.luminance_channels() {
                    spec.kernel_2d(c).1.iter().map(|v| v.abs()).sum::<f64>()
                } else {
                    1.0 + LUMA.iter().sum::<f64>() - LUMA[if c == spec.luminance_channels() { 2 } else { 0 }]
                };
                let worst = la
                    .plane(c)
                    .iter()
                    .zip(lb.plane(c))
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                assert!(worst <= gain * delta + 1e-12, "ch {c}: {worst} > {}", gain * delta);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let spec = FilterBankSpec::default();
        let img = random_image(16, 16, 3, 2);
        let up = extract(&img, &spec).unwrap().zeros_like();
        let g = extract_backward(&img, &spec, &up).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_path_is_adjoint() {
        let spec = FilterBankSpec {
            rectify: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (w, h, c) in [(33, 21, 3), (16, 16, 1)] {
            let x = random_image(w, h, c, 7);
            let fx = extract(&x, &spec).unwrap();
            let mut u = fx.zeros_like();
            for l in &mut u.levels {
                for v in &mut l.data {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
            let lhs: f64 = fx
                .levels
                .iter()
                .zip(&u.levels)
                .map(|(a, b)| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>())
                .sum();
            let g = extract_backward(&x, &spec, &u).unwrap();
            let rhs: f64 = x.data().iter().zip(g.data()).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let spec = FilterBankSpec::default();
        let a = extract(&random_image(16, 16, 3, 1), &spec).unwrap();
        let img = random_image(20, 16, 3, 1);
        assert_eq!(extract_backward(&img, &spec, &a).unwrap_err(), FeatureError::ShapeMismatch);
    }

    #[test]
    fn spec_serializes() {
        let spec = FilterBankSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<FilterBankSpec>(&json).unwrap(), spec);
    }
}
