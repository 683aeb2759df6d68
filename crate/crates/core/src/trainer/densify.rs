use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::splat::{Splat, SplatSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// τ: mean positional-gradient magnitude (per image diagonal) above
    /// which a splat is densified.
    pub grad_threshold: f64,
    /// Splats whose larger scale exceeds this fraction of the image
    /// diagonal are split, smaller ones cloned.
    pub split_scale_threshold: f64,
    pub split_factor: f64,
    pub prune_opacity_threshold: f64,
    pub max_splats: usize,
    /// Spread of the depth-key offset given to new splats.
    pub depth_jitter: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            split_scale_threshold: 0.01,
            split_factor: 1.6,
            prune_opacity_threshold: 0.005,
            max_splats: 5000,
            depth_jitter: 1e-3,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("grad_threshold", self.grad_threshold),
            ("split_scale_threshold", self.split_scale_threshold),
            ("prune_opacity_threshold", self.prune_opacity_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be > 0"));
            }
        }
        if !(self.split_factor > 1.0) {
            return Err("split_factor must be > 1".into());
        }
        if self.max_splats == 0 {
            return Err("max_splats must be ≥ 1".into());
        }
        if !(self.depth_jitter >= 0.0) {
            return Err("depth_jitter must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Where an output splat came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    Clone(usize),
    Split(usize),
}

#[derive(Clone, Debug)]
pub struct DensifyResult {
    pub splats: SplatSet,
    /// One entry per output splat.
    pub origins: Vec<Origin>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Prunes splats below the opacity threshold, then clones or splits the
/// survivors whose mean positional gradient exceeds τ, highest gradient
/// first, until `max_splats` is reached.
///
/// Output order: kept splats in input order, then clones, then split
/// children (two per split parent, which is removed).
pub fn densify_and_prune(
    splats: &SplatSet,
    mean_grad: &[f64],
    cfg: &DensifyConfig,
    diagonal: f64,
    seed: u64,
) -> DensifyResult {
    assert_eq!(splats.len(), mean_grad.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let survivors: Vec<usize> = (0..splats.len())
        .filter(|&i| splats.splats[i].opacity() >= cfg.prune_opacity_threshold)
        .collect();
    let pruned = splats.len() - survivors.len();

    let mut candidates: Vec<usize> = survivors
        .iter()
        .copied()
        .filter(|&i| mean_grad[i] > cfg.grad_threshold)
        .collect();
    candidates.sort_by(|&a, &b| mean_grad[b].total_cmp(&mean_grad[a]).then(a.cmp(&b)));
    candidates.truncate(cfg.max_splats.saturating_sub(survivors.len()));
    candidates.sort_unstable();

    let large = |s: &Splat| {
        let [a, b] = s.scales();
        a.max(b) > cfg.split_scale_threshold * diagonal
    };
    let is_split = |i: usize| candidates.binary_search(&i).is_ok() && large(&splats.splats[i]);

    let mut out = Vec::with_capacity(survivors.len() + candidates.len());
    let mut origins = Vec::with_capacity(out.capacity());
    for &i in &survivors {
        if !is_split(i) {
            out.push(splats.splats[i]);
            origins.push(Origin::Kept(i));
        }
    }
    let mut cloned = 0;
    for &i in &candidates {
        if !large(&splats.splats[i]) {
            let mut c = splats.splats[i];
            c.depth_key += cfg.depth_jitter * rng.random_range(-1.0..1.0);
            out.push(c);
            origins.push(Origin::Clone(i));
            cloned += 1;
        }
    }
    let mut split = 0;
    let shrink = cfg.split_factor.ln();
    for &i in &candidates {
        let p = &splats.splats[i];
        if !large(p) {
            continue;
        }
        let [s1, s2] = p.scales();
        let (sin, cos) = p.rotation.sin_cos();
        let (axis, major) = if s1 >= s2 {
            ([cos, sin], s1)
        } else {
            ([-sin, cos], s2)
        };
        for sign in [1.0, -1.0] {
            let mut c = *p;
            c.mean = [
                p.mean[0] + sign * 0.5 * major * axis[0],
                p.mean[1] + sign * 0.5 * major * axis[1],
            ];
            c.log_scale = [p.log_scale[0] - shrink, p.log_scale[1] - shrink];
            c.depth_key += cfg.depth_jitter * rng.random_range(-1.0..1.0);
            out.push(c);
            origins.push(Origin::Split(i));
        }
        split += 1;
    }
    DensifyResult {
        splats: SplatSet::new(out),
        origins,
        cloned,
        split,
        pruned,
    }
}
