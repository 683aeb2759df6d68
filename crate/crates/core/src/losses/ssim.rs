//! Gaussian-window SSIM and its multi-scale product form, with gradients
//! with respect to the second image.

use crate::features::{downsample2, downsample2_adjoint, gaussian_kernel};

/// Per-plane SSIM statistics over all valid window positions.
pub(crate) struct SsimPlane {
    w: usize,
    h: usize,
    ow: usize,
    oh: usize,
    window: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    pub ssim: f64,
    pub cs: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let g: Vec<f64> = (-r..=r)
            .map(|k| (-(k * k) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        if self.sigma > 0.0 {
            g.into_iter().map(|v| v / s).collect()
        } else {
            gaussian_kernel(0.0)
        }
    }
}

/// Correlation without padding: output is `(w − k + 1) × (h − k + 1)`.
fn valid2(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&s[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (j, kv) in k.iter().enumerate() {
            let r = &rows[(y + j) * ow..(y + j + 1) * ow];
            for x in 0..ow {
                out[y * ow + x] += kv * r[x];
            }
        }
    }
    out
}

fn valid2_adjoint(grad: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for (j, kv) in k.iter().enumerate() {
            for x in 0..ow {
                rows[(y + j) * ow + x] += kv * grad[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let g = rows[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * g;
            }
        }
    }
    out
}

impl SsimPlane {
    pub fn new(x: &[f64], y: &[f64], w: usize, h: usize, p: &SsimParams) -> Self {
        let k = p.taps();
        let (ow, oh) = (w + 1 - k.len(), h + 1 - k.len());
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_x = valid2(x, w, h, &k);
        let mu_y = valid2(y, w, h, &k);
        let exx = valid2(&sq(x, x), w, h, &k);
        let eyy = valid2(&sq(y, y), w, h, &k);
        let exy = valid2(&sq(x, y), w, h, &k);
        let m = ow * oh;
        let (mut a1, mut a2, mut b1, mut b2) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let (mut ssim, mut cs) = (0.0, 0.0);
        for i in 0..m {
            let (mx, my) = (mu_x[i], mu_y[i]);
            a1[i] = 2.0 * mx * my + p.c1;
            a2[i] = 2.0 * (exy[i] - mx * my) + p.c2;
            b1[i] = mx * mx + my * my + p.c1;
            b2[i] = (exx[i] - mx * mx) + (eyy[i] - my * my) + p.c2;
            ssim += a1[i] * a2[i] / (b1[i] * b2[i]);
            cs += a2[i] / b2[i];
        }
        Self {
            w,
            h,
            ow,
            oh,
            window: k,
            mu_x,
            mu_y,
            a1,
            a2,
            b1,
            b2,
            ssim: ssim / m as f64,
            cs: cs / m as f64,
        }
    }

    /// Gradient with respect to `y` of `g_ssim·ssim + g_cs·cs`.
    pub fn backward(&self, x: &[f64], y: &[f64], g_ssim: f64, g_cs: f64) -> Vec<f64> {
        let m = self.ow * self.oh;
        let (gs, gc) = (g_ssim / m as f64, g_cs / m as f64);
        let mut g_mu = vec![0.0; m];
        let mut g_exy = vec![0.0; m];
        let mut g_eyy = vec![0.0; m];
        for i in 0..m {
            let (a1, a2, b1, b2) = (self.a1[i], self.a2[i], self.b1[i], self.b2[i]);
            let s = a1 * a2 / (b1 * b2);
            let c = a2 / b2;
            let ga1 = gs * a2 / (b1 * b2);
            let ga2 = gs * a1 / (b1 * b2) + gc / b2;
            let gb1 = -gs * s / b1;
            let gb2 = -gs * s / b2 - gc * c / b2;
            let (mx, my) = (self.mu_x[i], self.mu_y[i]);
            g_mu[i] = 2.0 * mx * (ga1 - ga2) + 2.0 * my * (gb1 - gb2);
            g_exy[i] = 2.0 * ga2;
            g_eyy[i] = gb2;
        }
        let (w, h, k) = (self.w, self.h, &self.window);
        let a = valid2_adjoint(&g_mu, w, h, k);
        let b = valid2_adjoint(&g_eyy, w, h, k);
        let c = valid2_adjoint(&g_exy, w, h, k);
        (0..w * h).map(|i| a[i] + 2.0 * y[i] * b[i] + x[i] * c[i]).collect()
    }
}

/// Number of MS-SSIM scales usable for the given extent.
pub(crate) fn msssim_scales(w: usize, h: usize, window: usize, max_scales: usize) -> usize {
    let side = w.min(h);
    let mut m = 0;
    while m < max_scales && side >= window << m {
        m += 1;
    }
    m
}

/// Single-plane MS-SSIM value and gradient with respect to `y`.
pub(crate) fn msssim_plane(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    p: &SsimParams,
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let m = weights.len();
    let mut xs = vec![(x.to_vec(), w, h)];
    let mut ys = vec![y.to_vec()];
    for _ in 1..m {
        let (px, pw, ph) = xs.last().unwrap();
        let (dx, dw, dh) = downsample2(px, *pw, *ph);
        let (dy, _, _) = downsample2(ys.last().unwrap(), *pw, *ph);
        xs.push((dx, dw, dh));
        ys.push(dy);
    }
    let planes: Vec<SsimPlane> = xs
        .iter()
        .zip(&ys)
        .map(|((px, pw, ph), py)| SsimPlane::new(px, py, *pw, *ph, p))
        .collect();
    let terms: Vec<f64> = (0..m)
        .map(|j| {
            let v = if j + 1 < m { planes[j].cs } else { planes[j].ssim };
            v.max(0.0)
        })
        .collect();
    let value: f64 = terms.iter().zip(weights).map(|(t, wj)| t.powf(*wj)).product();

    let mut carry: Option<Vec<f64>> = None;
    for j in (0..m).rev() {
        let t = terms[j];
        // d value / d term_j; terms clamped at zero contribute nothing
        let g = if t > 0.0 { value * weights[j] / t } else { 0.0 };
        let (gs, gc) = if j + 1 < m { (0.0, g) } else { (g, 0.0) };
        let (px, pw, ph) = &xs[j];
        let mut gy = planes[j].backward(px, &ys[j], gs, gc);
        if let Some(c) = carry.take() {
            for (a, b) in gy.iter_mut().zip(c) {
                *a += b;
            }
        }
        carry = Some(if j > 0 {
            let (_, uw, uh) = &xs[j - 1];
            downsample2_adjoint(&gy, *uw, *uh)
        } else {
            debug_assert_eq!((*pw, *ph), (w, h));
            gy
        });
    }
    (value, carry.unwrap())
}
