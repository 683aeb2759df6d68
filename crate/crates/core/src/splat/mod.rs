//! The 2D Gaussian splat model.
//!
//! Each splat carries a position in pixel coordinates (pixel `(i, j)` has its
//! center at `(i + 0.5, j + 0.5)`), log-scales and a rotation defining the
//! covariance `R(θ)·diag(s₁², s₂²)·R(θ)ᵀ`, color and opacity stored as
//! logits, and a fixed depth key that sets the blend order.

mod checkpoint;
mod render;

pub use checkpoint::{
    decode_splats, encode_splats, load_checkpoint_meta, load_splats, meta_path, save_checkpoint,
    save_splats, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use render::{
    falloff, render, render_backward, RenderError, RenderOutput, SplatGradients,
    CUTOFF_MAHALANOBIS_SQ,
};

use serde::{Deserialize, Serialize};

/// Number of optimizable scalars per splat.
pub const PARAM_COUNT: usize = 9;

/// Parameter groups in flat-parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Position,
    LogScale,
    Rotation,
    Color,
    Opacity,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Color,
        ParamGroup::Opacity,
    ];

    /// Indices of this group inside [`Splat::params`].
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            ParamGroup::Position => 0..2,
            ParamGroup::LogScale => 2..4,
            ParamGroup::Rotation => 4..5,
            ParamGroup::Color => 5..8,
            ParamGroup::Opacity => 8..9,
        }
    }

    pub fn of_param(index: usize) -> ParamGroup {
        match index {
            0 | 1 => ParamGroup::Position,
            2 | 3 => ParamGroup::LogScale,
            4 => ParamGroup::Rotation,
            5..=7 => ParamGroup::Color,
            _ => ParamGroup::Opacity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::LogScale => "log_scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Color => "color",
            ParamGroup::Opacity => "opacity",
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub mean: [f64; 2],
    pub log_scale: [f64; 2],
    pub rotation: f64,
    /// Unconstrained color; the rendered color is `sigmoid` of each entry.
    pub color_logit: [f64; 3],
    pub opacity_logit: f64,
    pub depth_key: f64,
}

impl Splat {
    /// An isotropic splat with the given color and opacity (both in `(0, 1)`).
    pub fn isotropic(mean: [f64; 2], scale: f64, rgb: [f64; 3], opacity: f64, depth_key: f64) -> Self {
        Self {
            mean,
            log_scale: [scale.ln(); 2],
            rotation: 0.0,
            color_logit: rgb.map(logit),
            opacity_logit: logit(opacity),
            depth_key,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.color_logit.map(sigmoid)
    }

    pub fn scales(&self) -> [f64; 2] {
        self.log_scale.map(f64::exp)
    }

    /// `R(θ)·diag(s₁², s₂²)·R(θ)ᵀ` as `[[a, b], [b, c]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let [s1, s2] = self.scales();
        let (sn, cs) = self.rotation.sin_cos();
        let (v1, v2) = (s1 * s1, s2 * s2);
        let a = cs * cs * v1 + sn * sn * v2;
        let c = sn * sn * v1 + cs * cs * v2;
        let b = cs * sn * (v1 - v2);
        [[a, b], [b, c]]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite()) && self.depth_key.is_finite()
    }

    /// Flat optimizable parameters: x, y, log s₁, log s₂, θ, r, g, b, opacity.
    pub fn params(&self) -> [f64; PARAM_COUNT] {
        [
            self.mean[0],
            self.mean[1],
            self.log_scale[0],
            self.log_scale[1],
            self.rotation,
            self.color_logit[0],
            self.color_logit[1],
            self.color_logit[2],
            self.opacity_logit,
        ]
    }

    pub fn set_params(&mut self, p: &[f64; PARAM_COUNT]) {
        self.mean = [p[0], p[1]];
        self.log_scale = [p[2], p[3]];
        self.rotation = p[4];
        self.color_logit = [p[5], p[6], p[7]];
        self.opacity_logit = p[8];
    }

    pub fn from_params(p: &[f64; PARAM_COUNT], depth_key: f64) -> Self {
        let mut s = Splat {
            mean: [0.0; 2],
            log_scale: [0.0; 2],
            rotation: 0.0,
            color_logit: [0.0; 3],
            opacity_logit: 0.0,
            depth_key,
        };
        s.set_params(p);
        s
    }
}

/// A collection of splats. Blend order is ascending `depth_key`, ties broken
/// by index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplatSet {
    pub splats: Vec<Splat>,
}

impl SplatSet {
    pub fn new(splats: Vec<Splat>) -> Self {
        Self { splats }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Splat> {
        self.splats.iter()
    }

    /// Indices sorted front to back.
    pub fn depth_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.splats.len()).collect();
        order.sort_by(|&a, &b| {
            self.splats[a]
                .depth_key
                .total_cmp(&self.splats[b].depth_key)
                .then(a.cmp(&b))
        });
        order
    }

    /// First splat with a non-finite field.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.splats.iter().position(|s| !s.is_finite())
    }
}

impl FromIterator<Splat> for SplatSet {
    fn from_iter<T: IntoIterator<Item = Splat>>(iter: T) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_is_spd_and_half_turn_symmetric() {
        let s = Splat {
            mean: [3.0, 4.0],
            log_scale: [1.2, -0.3],
            rotation: 0.7,
            color_logit: [0.0; 3],
            opacity_logit: 0.0,
            depth_key: 0.0,
        };
        let [[a, b], [_, c]] = s.covariance();
        assert!(a > 0.0 && a * c - b * b > 0.0);
        let t = Splat {
            rotation: 0.7 + std::f64::consts::PI,
            ..s
        };
        let [[a2, b2], [_, c2]] = t.covariance();
        assert!((a - a2).abs() < 1e-12 && (b - b2).abs() < 1e-12 && (c - c2).abs() < 1e-12);
        // determinant equals s1² s2²
        let [s1, s2] = s.scales();
        assert!((a * c - b * b - (s1 * s2).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn depth_order_breaks_ties_by_index() {
        let mk = |k| Splat::isotropic([0.0, 0.0], 1.0, [0.5; 3], 0.5, k);
        let set = SplatSet::new(vec![mk(2.0), mk(1.0), mk(2.0), mk(0.5)]);
        assert_eq!(set.depth_order(), vec![3, 1, 0, 2]);
    }

    #[test]
    fn params_round_trip() {
        let p = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        assert_eq!(Splat::from_params(&p, 0.0).params(), p);
        for i in 0..PARAM_COUNT {
            assert!(ParamGroup::of_param(i).range().contains(&i));
        }
    }
}
