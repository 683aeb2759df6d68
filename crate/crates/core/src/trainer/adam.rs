use serde::{Deserialize, Serialize};

use super::densify::Origin;
use crate::splat::{SplatGradients, SplatSet, PARAM_COUNT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err("adam betas must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return Err("adam eps must be > 0".into());
        }
        Ok(())
    }
}

/// Adam moments for every splat parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<[f64; PARAM_COUNT]>,
    v: Vec<[f64; PARAM_COUNT]>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![[0.0; PARAM_COUNT]; n],
            v: vec![[0.0; PARAM_COUNT]; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update with a learning rate per parameter slot.
    pub fn step(&mut self, splats: &mut SplatSet, grads: &SplatGradients, lr: &[f64; PARAM_COUNT]) {
        debug_assert_eq!(splats.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, s) in splats.splats.iter_mut().enumerate() {
            let g = &grads.params[i];
            let mut p = s.params();
            for k in 0..PARAM_COUNT {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = beta1 * *m + (1.0 - beta1) * g[k];
                *v = beta2 * *v + (1.0 - beta2) * g[k] * g[k];
                p[k] -= lr[k] * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            s.set_params(&p);
        }
    }

    /// Carries state across densification: kept splats keep their
    /// moments, new ones start from zero.
    pub fn remap(&mut self, origins: &[Origin]) {
        let (m, v) = origins
            .iter()
            .map(|o| match o {
                Origin::Kept(i) => (self.m[*i], self.v[*i]),
                _ => ([0.0; PARAM_COUNT], [0.0; PARAM_COUNT]),
            })
            .unzip();
        self.m = m;
        self.v = v;
    }
}
