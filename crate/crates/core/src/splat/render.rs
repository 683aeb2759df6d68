//! Front-to-back alpha compositing of 2D Gaussians and its reverse pass.
//!
//! The per-pixel opacity of splat `i` is `αᵢ·w(q)` with
//! `q = dᵀΣᵢ⁻¹d` and `d = p − μᵢ`. `w` is the Gaussian `exp(−q/2)` minus
//! its second-order Taylor expansion at the 3σ ellipse (`q = 9`), rescaled so
//! `w(0) = 1`. It is exactly zero outside the ellipse and its first two
//! derivatives vanish on the boundary, so the rendered image is C² in every
//! parameter.

use super::{SplatSet, PARAM_COUNT};
use crate::image_io::ImageBuffer;
use crate::parallel;
use thiserror::Error;

/// Squared Mahalanobis radius of the evaluation support (3 standard deviations).
pub const CUTOFF_MAHALANOBIS_SQ: f64 = 9.0;

const TILE: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("splat {0} has a non-finite parameter")]
    NonFinite(usize),
    #[error("upstream gradient is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("upstream gradient contains non-finite values")]
    NonFiniteGradient,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// Three-channel rendered image.
    pub image: ImageBuffer,
    /// Residual transmittance per pixel, row-major `height × width`.
    pub transmittance: Vec<f64>,
}

/// `∂L/∂parameter` for every splat, in [`super::Splat::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGradients {
    pub params: Vec<[f64; PARAM_COUNT]>,
    /// Euclidean norm of `∂L/∂μᵢ` for this backward pass.
    pub position_grad_norm: Vec<f64>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            params: vec![[0.0; PARAM_COUNT]; n],
            position_grad_norm: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        for p in self.params.iter_mut().flatten() {
            *p *= k;
        }
        self.refresh_norms();
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &SplatGradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.refresh_norms();
    }

    pub fn refresh_norms(&mut self) {
        self.position_grad_norm = self.params.iter().map(|p| p[0].hypot(p[1])).collect();
    }

    /// Sum of squares over every entry.
    pub fn norm_sq(&self) -> f64 {
        self.params.iter().flatten().map(|v| v * v).sum()
    }
}

/// Falloff `w(q)` and its derivative `dw/dq`.
#[inline]
pub fn falloff(q: f64) -> (f64, f64) {
    if q >= CUTOFF_MAHALANOBIS_SQ {
        return (0.0, 0.0);
    }
    let tail = (-0.5 * CUTOFF_MAHALANOBIS_SQ).exp();
    let taylor = |r: f64| 1.0 + 0.5 * r + 0.125 * r * r;
    let norm = 1.0 - tail * taylor(CUTOFF_MAHALANOBIS_SQ);
    let r = CUTOFF_MAHALANOBIS_SQ - q;
    let g = (-0.5 * q).exp();
    let w = (g - tail * taylor(r)) / norm;
    let dw = (tail * (0.5 + 0.25 * r) - 0.5 * g) / norm;
    (w.max(0.0), dw)
}

/// A splat in render-ready form.
struct Prepared {
    index: usize,
    mean: [f64; 2],
    cos: f64,
    sin: f64,
    inv_var: [f64; 2],
    alpha: f64,
    rgb: [f64; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

struct Geometry {
    q: f64,
    u: [f64; 2],
}

impl Prepared {
    #[inline]
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    #[inline]
    fn geometry(&self, x: usize, y: usize) -> Geometry {
        let dx = x as f64 + 0.5 - self.mean[0];
        let dy = y as f64 + 0.5 - self.mean[1];
        let u1 = self.cos * dx + self.sin * dy;
        let u2 = -self.sin * dx + self.cos * dy;
        Geometry {
            q: u1 * u1 * self.inv_var[0] + u2 * u2 * self.inv_var[1],
            u: [u1, u2],
        }
    }
}

/// Inclusive pixel-index range whose centers lie in `[lo, hi]`.
fn pixel_span(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(size as f64 - 1.0);
    if size == 0 || first > last {
        return None;
    }
    Some((first as usize, last as usize))
}

struct Scene {
    prepared: Vec<Prepared>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl Scene {
    fn build(splats: &SplatSet, width: usize, height: usize) -> Result<Self, RenderError> {
        if let Some(i) = splats.first_non_finite() {
            return Err(RenderError::NonFinite(i));
        }
        let mut prepared = Vec::with_capacity(splats.len());
        for index in splats.depth_order() {
            let s = &splats.splats[index];
            let [[cxx, _], [_, cyy]] = s.covariance();
            let r = CUTOFF_MAHALANOBIS_SQ.sqrt();
            let (ex, ey) = (r * cxx.sqrt(), r * cyy.sqrt());
            let Some((x0, x1)) = pixel_span(s.mean[0] - ex, s.mean[0] + ex, width) else {
                continue;
            };
            let Some((y0, y1)) = pixel_span(s.mean[1] - ey, s.mean[1] + ey, height) else {
                continue;
            };
            let (sin, cos) = s.rotation.sin_cos();
            prepared.push(Prepared {
                index,
                mean: s.mean,
                cos,
                sin,
                inv_var: s.log_scale.map(|l| (-2.0 * l).exp()),
                alpha: s.opacity(),
                rgb: s.rgb(),
                x0,
                x1,
                y0,
                y1,
            });
        }
        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, p) in prepared.iter().enumerate() {
            for ty in p.y0 / TILE..=p.y1 / TILE {
                for tx in p.x0 / TILE..=p.x1 / TILE {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Ok(Self {
            prepared,
            tiles,
            tiles_x,
        })
    }

    #[inline]
    fn candidates(&self, x: usize, y: usize) -> &[u32] {
        &self.tiles[(y / TILE) * self.tiles_x + x / TILE]
    }
}

/// Renders `splats` onto a `width × height` RGB raster over `background`.
pub fn render(
    splats: &SplatSet,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Result<RenderOutput, RenderError> {
    let scene = Scene::build(splats, width, height)?;
    let bands = parallel::map_bands(height, |rows| {
        let mut color = Vec::with_capacity(rows.len() * width * 3);
        let mut trans = Vec::with_capacity(rows.len() * width);
        for y in rows {
            for x in 0..width {
                let mut c = [0.0; 3];
                let mut t = 1.0;
                for &k in scene.candidates(x, y) {
                    let p = &scene.prepared[k as usize];
                    if !p.covers(x, y) {
                        continue;
                    }
                    let (w, _) = falloff(p.geometry(x, y).q);
                    if w == 0.0 {
                        continue;
                    }
                    let a = p.alpha * w;
                    for ch in 0..3 {
                        c[ch] += t * a * p.rgb[ch];
                    }
                    t *= 1.0 - a;
                }
                for ch in 0..3 {
                    color.push(c[ch] + t * background[ch]);
                }
                trans.push(t);
            }
        }
        (color, trans)
    });
    let mut data = Vec::with_capacity(width * height * 3);
    let mut transmittance = Vec::with_capacity(width * height);
    for (c, t) in bands {
        data.extend(c);
        transmittance.extend(t);
    }
    Ok(RenderOutput {
        image: ImageBuffer::new(width, height, 3, data).expect("render shape"),
        transmittance,
    })
}

struct Contribution {
    k: usize,
    a: f64,
    w: f64,
    dw: f64,
    t: f64,
    geo: Geometry,
}

/// Reverse pass of [`render`]: given `∂L/∂C` per pixel and channel, returns
/// `∂L/∂θ` for every splat parameter.
pub fn render_backward(
    splats: &SplatSet,
    width: usize,
    height: usize,
    background: [f64; 3],
    grad_image: &ImageBuffer,
) -> Result<SplatGradients, RenderError> {
    if grad_image.shape() != (width, height, 3) {
        return Err(RenderError::ShapeMismatch {
            got: grad_image.shape(),
            expected: (width, height, 3),
        });
    }
    if grad_image.data().iter().any(|v| !v.is_finite()) {
        return Err(RenderError::NonFiniteGradient);
    }
    let n = splats.len();
    let scene = Scene::build(splats, width, height)?;
    let partials = parallel::map_blocks(height, 32, |rows| {
        let mut acc = vec![[0.0; PARAM_COUNT]; n];
        let mut chain: Vec<Contribution> = Vec::new();
        for y in rows {
            for x in 0..width {
                let g = [
                    grad_image.get(x, y, 0),
                    grad_image.get(x, y, 1),
                    grad_image.get(x, y, 2),
                ];
                if g == [0.0; 3] {
                    continue;
                }
                chain.clear();
                let mut t = 1.0;
                for &k in scene.candidates(x, y) {
                    let p = &scene.prepared[k as usize];
                    if !p.covers(x, y) {
                        continue;
                    }
                    let geo = p.geometry(x, y);
                    let (w, dw) = falloff(geo.q);
                    if w == 0.0 && dw == 0.0 {
                        continue;
                    }
                    let a = p.alpha * w;
                    chain.push(Contribution {
                        k: k as usize,
                        a,
                        w,
                        dw,
                        t,
                        geo,
                    });
                    t *= 1.0 - a;
                }
                // Color seen behind the current layer, built back to front.
                let mut behind = background;
                for c in chain.iter().rev() {
                    let p = &scene.prepared[c.k];
                    let out = &mut acc[p.index];
                    let mut ga = 0.0;
                    for ch in 0..3 {
                        let rgb = p.rgb[ch];
                        out[5 + ch] += g[ch] * c.a * c.t * rgb * (1.0 - rgb);
                        ga += g[ch] * (rgb - behind[ch]);
                        behind[ch] = rgb * c.a + (1.0 - c.a) * behind[ch];
                    }
                    ga *= c.t;
                    out[8] += ga * c.w * p.alpha * (1.0 - p.alpha);
                    let gq = ga * p.alpha * c.dw;
                    if gq == 0.0 {
                        continue;
                    }
                    let [u1, u2] = c.geo.u;
                    let [i1, i2] = p.inv_var;
                    out[0] -= gq * 2.0 * (p.cos * u1 * i1 - p.sin * u2 * i2);
                    out[1] -= gq * 2.0 * (p.sin * u1 * i1 + p.cos * u2 * i2);
                    out[2] -= gq * 2.0 * u1 * u1 * i1;
                    out[3] -= gq * 2.0 * u2 * u2 * i2;
                    out[4] += gq * 2.0 * u1 * u2 * (i1 - i2);
                }
            }
        }
        acc
    });
    let mut grads = SplatGradients::zeros(n);
    for part in partials {
        for (a, b) in grads.params.iter_mut().zip(part) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    grads.refresh_norms();
    Ok(grads)
}
