//! Pooled feature statistics, Wasserstein distortion and the pointwise
//! normalized-feature distance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::LossError;
use crate::features::{
    backward_from_tape, correlate2, correlate2_adjoint, downsample2, extract, extract_taped, gaussian_kernel,
    reflect, FeatureMap, FeatureStack, FilterBankSpec,
};
use crate::image_io::ImageBuffer;

/// Smoothing inside the pooled standard deviation.
pub const STD_EPS: f64 = 1e-6;
/// Smoothing of the per-entry distance near a perfect match.
pub const DIST_EPS: f64 = 1e-8;
/// Smoothing inside the per-location feature norm.
pub const NORM_EPS: f64 = 1e-6;

/// Per-pixel pooling width at full resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SigmaMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != width * height {
            return Err(LossError::Invalid(format!(
                "sigma map has {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossError::Invalid("sigma map values must be finite and ≥ 0".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, sigma: f64) -> Self {
        Self {
            width,
            height,
            data: vec![sigma; width * height],
        }
    }

    /// `scale` times the first channel of `img`.
    pub fn from_image(img: &ImageBuffer, scale: f64) -> Result<Self, LossError> {
        Self::new(img.width(), img.height(), img.plane(0).iter().map(|v| v * scale).collect())
    }

    /// Per-level maps: area-averaged to each level's extent, then divided
    /// by `2^ℓ` so the physical pooling extent stays fixed.
    fn levels(&self, n: usize) -> Vec<Vec<f64>> {
        let mut out = vec![self.data.clone()];
        let (mut w, mut h) = (self.width, self.height);
        let mut cur = self.data.clone();
        for l in 1..n {
            let (d, dw, dh) = downsample2(&cur, w, h);
            out.push(d.iter().map(|v| (v / (1u64 << l) as f64).max(0.0)).collect());
            cur = d;
            w = dw;
            h = dh;
        }
        out
    }
}

/// Pooling width: one σ everywhere, or a per-pixel map.
#[derive(Clone, Copy, Debug)]
pub enum Pooling<'a> {
    Constant(f64),
    Map(&'a SigmaMap),
}

enum LevelPool {
    Separable(Vec<f64>),
    PerPixel {
        kernels: Vec<Vec<f64>>,
        index: Vec<usize>,
    },
}

impl LevelPool {
    fn plan(pooling: &Pooling, stack: &FeatureStack) -> Result<Vec<LevelPool>, LossError> {
        match pooling {
            Pooling::Constant(s) => {
                if !(s.is_finite() && *s >= 0.0) {
                    return Err(LossError::Invalid(format!("sigma must be ≥ 0, got {s}")));
                }
                Ok((0..stack.levels.len())
                    .map(|l| LevelPool::Separable(gaussian_kernel(s / (1u64 << l) as f64)))
                    .collect())
            }
            Pooling::Map(map) => {
                let l0 = &stack.levels[0];
                if (map.width, map.height) != (l0.width, l0.height) {
                    return Err(LossError::SigmaMapShape {
                        map: (map.width, map.height),
                        image: (l0.width, l0.height),
                    });
                }
                Ok(map
                    .levels(stack.levels.len())
                    .into_iter()
                    .map(|sig| {
                        let mut seen: HashMap<u64, usize> = HashMap::new();
                        let mut kernels = Vec::new();
                        let index = sig
                            .iter()
                            .map(|s| {
                                *seen.entry(s.to_bits()).or_insert_with(|| {
                                    kernels.push(gaussian_kernel(*s));
                                    kernels.len() - 1
                                })
                            })
                            .collect();
                        LevelPool::PerPixel { kernels, index }
                    })
                    .collect())
            }
        }
    }

    fn apply(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        match self {
            LevelPool::Separable(k) => correlate2(src, w, h, k, k),
            LevelPool::PerPixel { kernels, index } if kernels.len() <= GROUPED_MAX => {
                let mut out = vec![0.0; w * h];
                for (g, k) in kernels.iter().enumerate() {
                    let full = correlate2(src, w, h, k, k);
                    for (i, o) in out.iter_mut().enumerate() {
                        if index[i] == g {
                            *o = full[i];
                        }
                    }
                }
                out
            }
            LevelPool::PerPixel { kernels, index } => {
                let r = kernels.iter().map(|k| k.len() / 2).max().unwrap_or(0);
                let (pad, pw) = padded(src, w, h, r);
                let mut out = vec![0.0; w * h];
                for y in 0..h {
                    for x in 0..w {
                        let k = &kernels[index[y * w + x]];
                        let off = r - k.len() / 2;
                        let mut acc = 0.0;
                        for (j, kj) in k.iter().enumerate() {
                            let row = &pad[(y + off + j) * pw + x + off..];
                            acc += kj * k.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        }
                        out[y * w + x] = acc;
                    }
                }
                out
            }
        }
    }

    fn adjoint(&self, grad: &[f64], w: usize, h: usize) -> Vec<f64> {
        match self {
            LevelPool::Separable(k) => correlate2_adjoint(grad, w, h, k, k),
            LevelPool::PerPixel { kernels, index } if kernels.len() <= GROUPED_MAX => {
                let mut out = vec![0.0; w * h];
                for (g, k) in kernels.iter().enumerate() {
                    let masked: Vec<f64> = grad
                        .iter()
                        .zip(index)
                        .map(|(v, i)| if *i == g { *v } else { 0.0 })
                        .collect();
                    for (o, v) in out.iter_mut().zip(correlate2_adjoint(&masked, w, h, k, k)) {
                        *o += v;
                    }
                }
                out
            }
            LevelPool::PerPixel { kernels, index } => {
                let r = kernels.iter().map(|k| k.len() / 2).max().unwrap_or(0);
                let pw = w + 2 * r;
                let mut pad = vec![0.0; pw * (h + 2 * r)];
                for y in 0..h {
                    for x in 0..w {
                        let g = grad[y * w + x];
                        let k = &kernels[index[y * w + x]];
                        let off = r - k.len() / 2;
                        for (j, kj) in k.iter().enumerate() {
                            let row = &mut pad[(y + off + j) * pw + x + off..];
                            for (o, ki) in row.iter_mut().zip(k) {
                                *o += kj * ki * g;
                            }
                        }
                    }
                }
                let mut out = vec![0.0; w * h];
                for py in 0..h + 2 * r {
                    let sy = reflect(py as isize - r as isize, h);
                    for px in 0..pw {
                        out[sy * w + reflect(px as isize - r as isize, w)] += pad[py * pw + px];
                    }
                }
                out
            }
        }
    }
}

/// Above this many distinct widths per level, pooling runs per pixel
/// instead of one separable pass per width.
const GROUPED_MAX: usize = 8;

/// Reflect-padded copy of a plane, `r` samples on every side.
fn padded(src: &[f64], w: usize, h: usize, r: usize) -> (Vec<f64>, usize) {
    let pw = w + 2 * r;
    let mut out = Vec::with_capacity(pw * (h + 2 * r));
    for py in 0..h + 2 * r {
        let sy = reflect(py as isize - r as isize, h);
        for px in 0..pw {
            out.push(src[sy * w + reflect(px as isize - r as isize, w)]);
        }
    }
    (out, pw)
}

/// Local mean and standard deviation of every feature channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledStats {
    pub mean: Vec<FeatureMap>,
    pub std: Vec<FeatureMap>,
    variance: Vec<FeatureMap>,
}

pub fn pool_stats(features: &FeatureStack, pooling: Pooling) -> Result<PooledStats, LossError> {
    let plan = LevelPool::plan(&pooling, features)?;
    Ok(pool_with(features, &plan))
}

fn pool_with(features: &FeatureStack, plan: &[LevelPool]) -> PooledStats {
    let mut mean = Vec::new();
    let mut std = Vec::new();
    let mut variance = Vec::new();
    for (map, pool) in features.levels.iter().zip(plan) {
        let (w, h) = (map.width, map.height);
        let mut m = FeatureMap::zeros(w, h, map.channels);
        let mut s = m.clone();
        let mut v = m.clone();
        for c in 0..map.channels {
            let f = map.plane(c);
            let mu = pool.apply(f, w, h);
            let sq: Vec<f64> = f.iter().map(|a| a * a).collect();
            let e2 = pool.apply(&sq, w, h);
            for i in 0..w * h {
                let var = e2[i] - mu[i] * mu[i];
                v.plane_mut(c)[i] = var;
                s.plane_mut(c)[i] = (var.max(0.0) + STD_EPS * STD_EPS).sqrt() - STD_EPS;
            }
            m.plane_mut(c).copy_from_slice(&mu);
        }
        mean.push(m);
        std.push(s);
        variance.push(v);
    }
    PooledStats { mean, std, variance }
}

fn pool_backward(
    features: &FeatureStack,
    stats: &PooledStats,
    plan: &[LevelPool],
    g_mean: &[FeatureMap],
    g_std: &[FeatureMap],
) -> FeatureStack {
    let mut out = features.zeros_like();
    for (l, map) in features.levels.iter().enumerate() {
        let (w, h) = (map.width, map.height);
        for c in 0..map.channels {
            let mu = stats.mean[l].plane(c);
            let var = stats.variance[l].plane(c);
            let gs = g_std[l].plane(c);
            let mut g_mu = g_mean[l].plane(c).to_vec();
            let mut g_e2 = vec![0.0; w * h];
            for i in 0..w * h {
                let g_var = if var[i] > 0.0 {
                    gs[i] * 0.5 / (var[i] + STD_EPS * STD_EPS).sqrt()
                } else {
                    0.0
                };
                g_e2[i] = g_var;
                g_mu[i] -= 2.0 * mu[i] * g_var;
            }
            let a = plan[l].adjoint(&g_mu, w, h);
            let b = plan[l].adjoint(&g_e2, w, h);
            let f = map.plane(c);
            for (i, o) in out.levels[l].plane_mut(c).iter_mut().enumerate() {
                *o = a[i] + 2.0 * f[i] * b[i];
            }
        }
    }
    out
}

/// Smoothed per-entry distance `D / sqrt(D + ε)` of a squared distance `D`
/// and its derivative; exactly zero at `D = 0`.
fn entry(d2: f64) -> (f64, f64) {
    let s = d2 + DIST_EPS;
    let r = s.sqrt();
    (d2 / r, (d2 + 2.0 * DIST_EPS) / (2.0 * s * r))
}

/// WD between two sets of pooled statistics and its gradient with respect
/// to the statistics of `b`.
fn wd_stats(a: &PooledStats, b: &PooledStats) -> (f64, Vec<FeatureMap>, Vec<FeatureMap>) {
    let levels = a.mean.len();
    let mut total = 0.0;
    let mut g_mean = Vec::with_capacity(levels);
    let mut g_std = Vec::with_capacity(levels);
    for l in 0..levels {
        let (ma, mb) = (&a.mean[l], &b.mean[l]);
        let (sa, sb) = (&a.std[l], &b.std[l]);
        let n = ma.data.len();
        let scale = 1.0 / (n as f64 * levels as f64);
        let mut gm = FeatureMap::zeros(ma.width, ma.height, ma.channels);
        let mut gs = gm.clone();
        let mut acc = 0.0;
        for i in 0..n {
            let dm = mb.data[i] - ma.data[i];
            let ds = sb.data[i] - sa.data[i];
            let (v, dv) = entry(dm * dm + ds * ds);
            acc += v;
            gm.data[i] = scale * dv * 2.0 * dm;
            gs.data[i] = scale * dv * 2.0 * ds;
        }
        total += acc / n as f64;
        g_mean.push(gm);
        g_std.push(gs);
    }
    (total / levels as f64, g_mean, g_std)
}

/// Target-side state reused across many evaluations.
pub(crate) struct WdTarget {
    spec: FilterBankSpec,
    plan: Vec<LevelPool>,
    stats: PooledStats,
}

impl WdTarget {
    pub fn new(target: &ImageBuffer, spec: &FilterBankSpec, pooling: Pooling) -> Result<Self, LossError> {
        let feats = extract(target, spec)?;
        let plan = LevelPool::plan(&pooling, &feats)?;
        let stats = pool_with(&feats, &plan);
        Ok(Self {
            spec: spec.clone(),
            plan,
            stats,
        })
    }

    pub fn eval(&self, render: &ImageBuffer) -> Result<(f64, ImageBuffer), LossError> {
        let (feats, tape) = extract_taped(render, &self.spec)?;
        if feats.levels[0].width != self.stats.mean[0].width || feats.levels[0].height != self.stats.mean[0].height
            || feats.levels[0].channels != self.stats.mean[0].channels
        {
            return Err(LossError::Invalid("render and target shapes differ".into()));
        }
        let stats = pool_with(&feats, &self.plan);
        let (value, gm, gs) = wd_stats(&self.stats, &stats);
        let g_feat = pool_backward(&feats, &stats, &self.plan, &gm, &gs);
        Ok((value, backward_from_tape(&tape, &self.spec, &g_feat)))
    }
}

/// Mean squared difference of per-location unit-normalized feature vectors.
pub(crate) fn feat_pointwise(
    x: &ImageBuffer,
    y: &ImageBuffer,
    spec: &FilterBankSpec,
) -> Result<(f64, ImageBuffer), LossError> {
    let fx = extract(x, spec)?;
    let (fy, tape) = extract_taped(y, spec)?;
    let levels = fx.levels.len();
    let mut grad = fy.zeros_like();
    let mut total = 0.0;
    for l in 0..levels {
        let (a, b) = (&fx.levels[l], &fy.levels[l]);
        let (n, c) = (a.width * a.height, a.channels);
        let scale = 1.0 / ((n * c) as f64 * levels as f64);
        let mut acc = 0.0;
        let g = &mut grad.levels[l];
        for p in 0..n {
            let norm = |m: &FeatureMap| {
                ((0..c).map(|k| m.data[k * n + p].powi(2)).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt()
            };
            let (ra, rb) = (norm(a), norm(b));
            let mut gn = vec![0.0; c];
            let mut dot = 0.0;
            for k in 0..c {
                let na = a.data[k * n + p] / ra;
                let nb = b.data[k * n + p] / rb;
                acc += (nb - na).powi(2);
                gn[k] = 2.0 * (nb - na) * scale;
                dot += nb * gn[k];
            }
            for k in 0..c {
                let nb = b.data[k * n + p] / rb;
                g.data[k * n + p] = (gn[k] - nb * dot) / rb;
            }
        }
        total += acc / (n * c) as f64;
    }
    Ok((total / levels as f64, backward_from_tape(&tape, spec, &grad)))
}
