//! Distortion objectives with exact gradients with respect to the render.
//!
//! Every loss takes `(x, x̂)` with `x` the target and `x̂` the render and
//! returns the value together with `∂loss/∂x̂`.

mod ssim;
mod wd;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FilterBankSpec};
use crate::image_io::{ImageBuffer, ImageError};
use ssim::{msssim_plane, msssim_scales, SsimParams, SsimPlane};
pub use wd::{pool_stats, PooledStats, Pooling, SigmaMap, DIST_EPS, NORM_EPS, STD_EPS};
use wd::WdTarget;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const COMPOSITE_WEIGHTS: [f64; 4] = [0.05, 0.30, 0.60, 0.10];
pub const WD_R_BETA: f64 = 1.0 / 0.09;
/// Feature gain used by the default loss configuration. The filter bank
/// responds in units of image intensity, so WD values are tiny next to
/// L1+SSIM; this puts ‖∇WD‖ / ‖∇(β·orig)‖ near 1.6 on natural 64² images.
pub const WD_FEATURE_GAIN: f64 = 450.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ImageError),
    #[error("image {width}x{height} is smaller than the {window}px SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("sigma map is {map:?}, image is {image:?}")]
    SigmaMapShape { map: (usize, usize), image: (usize, usize) },
    #[error("invalid loss configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Original,
    Composite,
    Wd,
    WdR,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Original => "original",
            LossKind::Composite => "composite",
            LossKind::Wd => "wd",
            LossKind::WdR => "wd_r",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "original" => Some(LossKind::Original),
            "composite" => Some(LossKind::Composite),
            "wd" => Some(LossKind::Wd),
            "wd_r" | "wd-r" => Some(LossKind::WdR),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Global scale of the WD-based objectives.
    pub gamma: f64,
    /// L1, L2, 1 − MS-SSIM and pointwise-feature weights of `composite`.
    pub weights: [f64; 4],
    /// Weight of the original loss inside WD-R.
    pub beta: f64,
    /// Pooling width in pixels at full resolution.
    pub sigma: f64,
    /// Per-pixel pooling width; overrides `sigma` when present.
    #[serde(skip)]
    pub sigma_map: Option<SigmaMap>,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub msssim_weights: [f64; 5],
    pub features: FilterBankSpec,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Original,
            gamma: 1.0,
            weights: COMPOSITE_WEIGHTS,
            beta: WD_R_BETA,
            sigma: 4.0,
            sigma_map: None,
            ssim_window: 11,
            ssim_sigma: 1.5,
            msssim_weights: MSSSIM_WEIGHTS,
            features: FilterBankSpec {
                gain: WD_FEATURE_GAIN,
                ..FilterBankSpec::default()
            },
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Invalid(m.into()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be > 0");
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("composite weights must be ≥ 0");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be ≥ 0");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be ≥ 0");
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return bad("ssim_window must be odd and ≥ 3");
        }
        if !(self.ssim_sigma > 0.0) {
            return bad("ssim_sigma must be > 0");
        }
        if self.msssim_weights.iter().any(|w| !(*w >= 0.0))
            || (self.msssim_weights.iter().sum::<f64>() - 1.0).abs() > 1e-3
        {
            return bad("msssim_weights must be ≥ 0 and sum to 1 (±1e-3)");
        }
        self.features.validate()?;
        Ok(())
    }

    fn ssim_params(&self) -> SsimParams {
        SsimParams {
            window: self.ssim_window,
            sigma: self.ssim_sigma,
            c1: SSIM_C1,
            c2: SSIM_C2,
        }
    }

    fn pooling(&self) -> Pooling<'_> {
        match &self.sigma_map {
            Some(m) => Pooling::Map(m),
            None => Pooling::Constant(self.sigma),
        }
    }
}

/// A loss value and its gradient with respect to the render.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: ImageBuffer,
    /// WD-R only: `‖∇ d_WD‖ / ‖∇ β·L_orig‖`.
    pub grad_norm_ratio: Option<f64>,
}

impl LossValue {
    fn new(value: f64, grad: ImageBuffer) -> Self {
        Self {
            value,
            grad,
            grad_norm_ratio: None,
        }
    }

    fn zero(like: &ImageBuffer) -> Self {
        let (w, h, c) = like.shape();
        Self::new(0.0, ImageBuffer::zeros(w, h, c))
    }

    /// `Σ kᵢ·partsᵢ`, accumulated in order.
    fn combine(like: &ImageBuffer, parts: &[(f64, &LossValue)]) -> Self {
        let mut out = Self::zero(like);
        for (k, p) in parts {
            out.value += k * p.value;
            for (o, g) in out.grad.data_mut().iter_mut().zip(p.grad.data()) {
                *o += k * g;
            }
        }
        out
    }
}

fn norm(img: &ImageBuffer) -> f64 {
    img.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_pair(x: &ImageBuffer, y: &ImageBuffer) -> Result<(), LossError> {
    x.check_same_shape(y)?;
    Ok(())
}

pub fn loss_l1(x: &ImageBuffer, y: &ImageBuffer) -> Result<LossValue, LossError> {
    check_pair(x, y)?;
    let n = x.data().len() as f64;
    let (w, h, c) = x.shape();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(x.data().len());
    for (a, b) in x.data().iter().zip(y.data()) {
        value += (b - a).abs();
        grad.push(if b > a {
            1.0 / n
        } else if b < a {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok(LossValue::new(value / n, ImageBuffer::new(w, h, c, grad)?))
}

pub fn loss_l2(x: &ImageBuffer, y: &ImageBuffer) -> Result<LossValue, LossError> {
    check_pair(x, y)?;
    let n = x.data().len() as f64;
    let (w, h, c) = x.shape();
    let value = x.data().iter().zip(y.data()).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n;
    let grad = x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * (b - a) / n).collect();
    Ok(LossValue::new(value, ImageBuffer::new(w, h, c, grad)?))
}

fn interleave(planes: Vec<Vec<f64>>, w: usize, h: usize) -> ImageBuffer {
    let c = planes.len();
    ImageBuffer::from_fn(w, h, c, |x, y, k| planes[k][y * w + x])
}

/// `1 − SSIM`, channel-averaged.
pub fn loss_ssim(x: &ImageBuffer, y: &ImageBuffer, cfg: &LossConfig) -> Result<LossValue, LossError> {
    check_pair(x, y)?;
    let (w, h, c) = x.shape();
    if w < cfg.ssim_window || h < cfg.ssim_window {
        return Err(LossError::TooSmall {
            width: w,
            height: h,
            window: cfg.ssim_window,
        });
    }
    let p = cfg.ssim_params();
    let mut ssim = 0.0;
    let mut planes = Vec::with_capacity(c);
    for k in 0..c {
        let (px, py) = (x.plane(k), y.plane(k));
        let s = SsimPlane::new(&px, &py, w, h, &p);
        ssim += s.ssim / c as f64;
        planes.push(s.backward(&px, &py, -1.0 / c as f64, 0.0));
    }
    Ok(LossValue::new(1.0 - ssim, interleave(planes, w, h)))
}

/// `1 − MS-SSIM`, using as many scales as the image extent allows.
pub fn loss_msssim(x: &ImageBuffer, y: &ImageBuffer, cfg: &LossConfig) -> Result<LossValue, LossError> {
    check_pair(x, y)?;
    let (w, h, c) = x.shape();
    let m = msssim_scales(w, h, cfg.ssim_window, cfg.msssim_weights.len());
    if m == 0 {
        return Err(LossError::TooSmall {
            width: w,
            height: h,
            window: cfg.ssim_window,
        });
    }
    let total: f64 = cfg.msssim_weights[..m].iter().sum();
    let weights: Vec<f64> = cfg.msssim_weights[..m].iter().map(|v| v / total).collect();
    let p = cfg.ssim_params();
    let mut value = 0.0;
    let mut planes = Vec::with_capacity(c);
    for k in 0..c {
        let (v, g) = msssim_plane(&x.plane(k), &y.plane(k), w, h, &p, &weights);
        value += v / c as f64;
        planes.push(g.into_iter().map(|v| -v / c as f64).collect());
    }
    Ok(LossValue::new(1.0 - value, interleave(planes, w, h)))
}

/// Mean squared difference of unit-normalized feature vectors per location.
pub fn loss_feat_pointwise(x: &ImageBuffer, y: &ImageBuffer, bank: &FilterBankSpec) -> Result<LossValue, LossError> {
    check_pair(x, y)?;
    let (v, g) = wd::feat_pointwise(x, y, bank)?;
    Ok(LossValue::new(v, g))
}

/// Wasserstein distortion `d_WD` (not scaled by γ).
pub fn loss_wd(x: &ImageBuffer, y: &ImageBuffer, cfg: &LossConfig) -> Result<LossValue, LossError> {
    check_pair(x, y)?;
    let (v, g) = WdTarget::new(x, &cfg.features, cfg.pooling())?.eval(y)?;
    Ok(LossValue::new(v, g))
}

/// `0.8·L1 + 0.2·(1 − SSIM)`.
pub fn loss_original(x: &ImageBuffer, y: &ImageBuffer, cfg: &LossConfig) -> Result<LossValue, LossError> {
    let l1 = loss_l1(x, y)?;
    let ss = loss_ssim(x, y, cfg)?;
    Ok(LossValue::combine(y, &[(0.8, &l1), (0.2, &ss)]))
}

/// `ω₁·L1 + ω₂·L2 + ω₃·(1 − MS-SSIM) + ω₄·feat_pointwise`.
pub fn loss_composite(x: &ImageBuffer, y: &ImageBuffer, cfg: &LossConfig) -> Result<LossValue, LossError> {
    check_pair(x, y)?;
    let w = cfg.weights;
    let mut parts = Vec::new();
    if w[0] != 0.0 {
        parts.push((w[0], loss_l1(x, y)?));
    }
    if w[1] != 0.0 {
        parts.push((w[1], loss_l2(x, y)?));
    }
    if w[2] != 0.0 {
        parts.push((w[2], loss_msssim(x, y, cfg)?));
    }
    if w[3] != 0.0 {
        parts.push((w[3], loss_feat_pointwise(x, y, &cfg.features)?));
    }
    let refs: Vec<(f64, &LossValue)> = parts.iter().map(|(k, v)| (*k, v)).collect();
    Ok(LossValue::combine(y, &refs))
}

fn wd_r_from(wd: &LossValue, orig: &LossValue, cfg: &LossConfig, like: &ImageBuffer) -> LossValue {
    let mut out = LossValue::combine(like, &[(cfg.gamma, wd), (cfg.gamma * cfg.beta, orig)]);
    let denom = cfg.beta * norm(&orig.grad);
    out.grad_norm_ratio = Some(norm(&wd.grad) / denom);
    out
}

/// `γ·(d_WD + β·L_orig)`.
pub fn loss_wd_r(x: &ImageBuffer, y: &ImageBuffer, cfg: &LossConfig) -> Result<LossValue, LossError> {
    let wd = loss_wd(x, y, cfg)?;
    let orig = loss_original(x, y, cfg)?;
    Ok(wd_r_from(&wd, &orig, cfg, y))
}

/// Training objective for a fixed target; caches target-side statistics.
///
/// `original` and `composite` are used as-is, `wd` is `γ·d_WD`, `wd_r` is
/// `γ·(d_WD + β·L_orig)`.
pub struct Objective {
    cfg: LossConfig,
    target: ImageBuffer,
    wd: Option<WdTarget>,
}

impl Objective {
    pub fn new(cfg: LossConfig, target: ImageBuffer) -> Result<Self, LossError> {
        cfg.validate()?;
        let wd = match cfg.kind {
            LossKind::Wd | LossKind::WdR => Some(WdTarget::new(&target, &cfg.features, cfg.pooling())?),
            _ => None,
        };
        Ok(Self { cfg, target, wd })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn target(&self) -> &ImageBuffer {
        &self.target
    }

    pub fn eval(&self, render: &ImageBuffer) -> Result<LossValue, LossError> {
        let (x, cfg) = (&self.target, &self.cfg);
        check_pair(x, render)?;
        match cfg.kind {
            LossKind::Original => loss_original(x, render, cfg),
            LossKind::Composite => loss_composite(x, render, cfg),
            LossKind::Wd | LossKind::WdR => {
                let (v, g) = self.wd.as_ref().expect("wd target").eval(render)?;
                let wd = LossValue::new(v, g);
                if cfg.kind == LossKind::Wd {
                    Ok(LossValue::combine(render, &[(cfg.gamma, &wd)]))
                } else {
                    let orig = loss_original(x, render, cfg)?;
                    Ok(wd_r_from(&wd, &orig, cfg, render))
                }
            }
        }
    }

    /// The unscaled original loss, used during warm-up.
    pub fn eval_original(&self, render: &ImageBuffer) -> Result<LossValue, LossError> {
        loss_original(&self.target, render, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_l2_constant_offset() {
        let x = ImageBuffer::filled(16, 16, 3, 0.3);
        let y = ImageBuffer::filled(16, 16, 3, 0.4);
        assert!((loss_l1(&x, &y).unwrap().value - 0.1).abs() < 1e-12);
        assert!((loss_l2(&x, &y).unwrap().value - 0.01).abs() < 1e-12);
        assert_eq!(loss_l1(&x, &x).unwrap().value, 0.0);
    }

    #[test]
    fn ssim_of_flat_pair_has_closed_form() {
        let cfg = LossConfig::default();
        let x = ImageBuffer::filled(16, 16, 3, 0.5);
        let y = ImageBuffer::filled(16, 16, 3, 0.7);
        let expect = 1.0 - (2.0 * 0.5 * 0.7 + 1e-4) / (0.25 + 0.49 + 1e-4);
        let got = loss_ssim(&x, &y, &cfg).unwrap().value;
        assert!((got - expect).abs() < 1e-12, "{got}");
        assert!((got - 0.0541).abs() < 1e-4);
        let orig = loss_original(&x, &ImageBuffer::filled(16, 16, 3, 0.6), &cfg).unwrap();
        assert!(orig.value > 0.0);
    }

    #[test]
    fn original_combines_components() {
        // L1 = 0.2 for this pair; check the weighted sum directly
        let cfg = LossConfig::default();
        let x = ImageBuffer::filled(16, 16, 3, 0.5);
        let y = ImageBuffer::filled(16, 16, 3, 0.7);
        let o = loss_original(&x, &y, &cfg).unwrap().value;
        let manual = 0.8 * loss_l1(&x, &y).unwrap().value + 0.2 * loss_ssim(&x, &y, &cfg).unwrap().value;
        assert!((o - manual).abs() < 1e-15);
    }

    #[test]
    fn too_small_is_rejected() {
        let cfg = LossConfig::default();
        let x = ImageBuffer::filled(10, 30, 3, 0.5);
        assert!(matches!(loss_ssim(&x, &x, &cfg), Err(LossError::TooSmall { .. })));
        assert!(matches!(loss_msssim(&x, &x, &cfg), Err(LossError::TooSmall { .. })));
        let y = ImageBuffer::filled(12, 30, 3, 0.5);
        assert!(matches!(loss_l1(&x, &y), Err(LossError::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = [
            LossConfig { gamma: 0.0, ..Default::default() },
            LossConfig { beta: -1.0, ..Default::default() },
            LossConfig { sigma: -0.5, ..Default::default() },
            LossConfig { weights: [0.1, -0.1, 0.0, 0.0], ..Default::default() },
            LossConfig { msssim_weights: [0.2; 5].map(|v| v * 1.1), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = LossConfig {
            kind: LossKind::WdR,
            gamma: 0.025,
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"wd_r\""));
        assert_eq!(serde_json::from_str::<LossConfig>(&s).unwrap(), cfg);
        let partial: LossConfig = serde_json::from_str(r#"{"kind":"wd","sigma":8}"#).unwrap();
        assert_eq!(partial.sigma, 8.0);
        assert_eq!(partial.beta, WD_R_BETA);
    }
}
