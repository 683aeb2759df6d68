//! Fitting a splat set to a target image.
//!
//! The loop renders, evaluates the objective, back-propagates into the
//! splat parameters and takes an Adam step. The first `warmup_iterations`
//! use the original loss; densification and pruning run every
//! `densify_interval` iterations between the end of warm-up and
//! `densify_stop_fraction · iterations`.

mod adam;
mod densify;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use densify::{densify_and_prune, DensifyConfig, DensifyResult, Origin};

use crate::image_io::{psnr, ImageBuffer, ImageError};
use crate::losses::{loss_ssim, loss_wd, LossConfig, LossError, LossKind, Objective};
use crate::splat::{render, render_backward, RenderError, Splat, SplatGradients, SplatSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("diverged at iteration {iteration}: loss {loss}")]
    Diverged {
        iteration: usize,
        loss: f64,
        /// Splats before the failing step.
        last_good: Box<SplatSet>,
    },
}

/// Per-group learning rates. Position steps are in units of the image
/// diagonal; the rest act on the stored (log / logit / radian) values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity: f64,
    /// Position rate decays exponentially to `position · position_final_ratio`.
    pub position_final_ratio: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 2e-3,
            log_scale: 5e-3,
            rotation: 1e-2,
            color: 1e-2,
            opacity: 2.5e-2,
            position_final_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Defaults to 15% of `iterations`.
    pub warmup_iterations: Option<usize>,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub densify_interval: usize,
    pub densify_stop_fraction: f64,
    pub densify: DensifyConfig,
    /// Splats created by `fit` when no initial set is given.
    pub init_count: usize,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            warmup_iterations: None,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            densify_interval: 100,
            densify_stop_fraction: 0.5,
            densify: DensifyConfig::default(),
            init_count: 200,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_iterations
            .unwrap_or((self.iterations as f64 * 0.15).round() as usize)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.warmup() > self.iterations {
            return bad(format!("warmup {} exceeds iterations {}", self.warmup(), self.iterations));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("position", lr.position),
            ("log_scale", lr.log_scale),
            ("rotation", lr.rotation),
            ("color", lr.color),
            ("opacity", lr.opacity),
            ("position_final_ratio", lr.position_final_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("learning rate {name} must be > 0"));
            }
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.densify_stop_fraction) {
            return bad("densify_stop_fraction must be in [0, 1]".into());
        }
        if self.init_count == 0 {
            return bad("init_count must be ≥ 1".into());
        }
        self.adam.validate().map_err(TrainError::Config)?;
        self.densify.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    fn densify_due(&self, iteration: usize) -> bool {
        let start = self.warmup();
        let stop = (self.densify_stop_fraction * self.iterations as f64).floor() as usize;
        iteration > start && iteration <= stop && (iteration - start).is_multiple_of(self.densify_interval)
    }
}

/// Quality of the final render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub wd_sigma0: f64,
    pub wd_sigma4: f64,
}

impl FinalMetrics {
    pub fn measure(target: &ImageBuffer, render: &ImageBuffer, loss: &LossConfig) -> Result<Self, TrainError> {
        let at = |sigma: f64| -> Result<f64, LossError> {
            let cfg = LossConfig {
                sigma,
                sigma_map: None,
                ..loss.clone()
            };
            Ok(loss_wd(target, render, &cfg)?.value)
        };
        Ok(Self {
            psnr: psnr(target, render)?,
            ssim: 1.0 - loss_ssim(target, render, loss)?.value,
            wd_sigma0: at(0.0)?,
            wd_sigma4: at(4.0)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_kind: LossKind,
    pub gamma: f64,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub seed: u64,
    /// Objective value at every iteration (warm-up iterations report the
    /// original loss).
    pub loss: Vec<f64>,
    pub splat_count: Vec<usize>,
    /// Mean WD-R gradient-norm ratio after warm-up, when applicable.
    pub mean_grad_norm_ratio: Option<f64>,
    pub final_metrics: Option<FinalMetrics>,
    /// Kept out of the serialized report so that reports are reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,splats\n");
        for (i, (l, n)) in self.loss.iter().zip(&self.splat_count).enumerate() {
            s.push_str(&format!("{},{l:e},{n}\n", i + 1));
        }
        s
    }
}

/// Starting point of a fit.
#[derive(Clone, Debug)]
pub enum Init {
    Splats(SplatSet),
    /// Random initialization with this many splats.
    Count(usize),
}

pub fn image_diagonal(w: usize, h: usize) -> f64 {
    (w as f64).hypot(h as f64)
}

/// Uniform positions, target colors at those positions, isotropic scale
/// `diag / sqrt(count)`, opacity 0.5 and uniform depth keys.
pub fn init_splats(target: &ImageBuffer, count: usize, seed: u64) -> SplatSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, c) = target.shape();
    let scale = image_diagonal(w, h) / (count.max(1) as f64).sqrt();
    (0..count)
        .map(|_| {
            let x = rng.random_range(0.0..w as f64);
            let y = rng.random_range(0.0..h as f64);
            let (px, py) = ((x as usize).min(w - 1), (y as usize).min(h - 1));
            let rgb = std::array::from_fn(|k| target.get(px, py, if c == 3 { k } else { 0 }));
            let key = rng.random();
            Splat::isotropic([x, y], scale, rgb, 0.5, key)
        })
        .collect()
}

/// What a single optimization step did.
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub iteration: usize,
    pub loss: f64,
    pub extra: f64,
    pub splats: usize,
    pub densified: Option<DensifyResult>,
}

/// Optional additional term: receives the current splats, adds its
/// gradient into the second argument and returns its value.
pub type ExtraTerm<'a> = dyn FnMut(&SplatSet, &mut SplatGradients) -> f64 + 'a;

/// An in-progress fit that can be driven one iteration at a time.
pub struct FitSession {
    objective: Objective,
    cfg: TrainConfig,
    splats: SplatSet,
    adam: Adam,
    grad_sum: Vec<f64>,
    grad_count: Vec<u32>,
    rng: ChaCha8Rng,
    iteration: usize,
    report: TrainReport,
    ratio_sum: f64,
    ratio_count: usize,
    diag: f64,
    started: Instant,
}

impl FitSession {
    pub fn new(target: ImageBuffer, init: Init, loss: LossConfig, cfg: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        if target.channels() != 3 {
            return Err(TrainError::Config(format!("target must be RGB, got {} channels", target.channels())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_seed = rng.random();
        let splats = match init {
            Init::Splats(s) => s,
            Init::Count(n) if n >= 1 => init_splats(&target, n, init_seed),
            Init::Count(_) => return Err(TrainError::Config("initial count must be ≥ 1".into())),
        };
        if splats.len() > cfg.densify.max_splats {
            return Err(TrainError::Config(format!(
                "{} initial splats exceed max_splats {}",
                splats.len(),
                cfg.densify.max_splats
            )));
        }
        let diag = image_diagonal(target.width(), target.height());
        let report = TrainReport {
            loss_kind: loss.kind,
            gamma: loss.gamma,
            iterations: cfg.iterations,
            warmup_iterations: cfg.warmup(),
            seed,
            loss: Vec::with_capacity(cfg.iterations),
            splat_count: Vec::with_capacity(cfg.iterations),
            mean_grad_norm_ratio: None,
            final_metrics: None,
            wall_time_s: 0.0,
        };
        let n = splats.len();
        Ok(Self {
            objective: Objective::new(loss, target)?,
            adam: Adam::new(cfg.adam.clone(), n),
            cfg,
            splats,
            grad_sum: vec![0.0; n],
            grad_count: vec![0; n],
            rng,
            iteration: 0,
            report,
            ratio_sum: 0.0,
            ratio_count: 0,
            diag,
            started: Instant::now(),
        })
    }

    pub fn splats(&self) -> &SplatSet {
        &self.splats
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn render(&self) -> Result<ImageBuffer, TrainError> {
        let t = self.objective.target();
        Ok(render(&self.splats, t.width(), t.height(), self.cfg.background)?.image)
    }

    fn position_lr(&self) -> f64 {
        let lr = &self.cfg.lr;
        let span = self.cfg.iterations.max(1) as f64;
        let t = (self.iteration as f64 / span).min(1.0);
        lr.position * lr.position_final_ratio.powf(t) * self.diag
    }

    pub fn step(&mut self, extra: Option<&mut ExtraTerm>) -> Result<StepInfo, TrainError> {
        let target = self.objective.target();
        let (w, h) = (target.width(), target.height());
        let bg = self.cfg.background;
        let image = render(&self.splats, w, h, bg)?.image;
        let warm = self.iteration < self.cfg.warmup();
        let lv = if warm {
            self.objective.eval_original(&image)?
        } else {
            self.objective.eval(&image)?
        };
        if let Some(r) = lv.grad_norm_ratio {
            if r.is_finite() {
                self.ratio_sum += r;
                self.ratio_count += 1;
            }
        }
        let mut grads = render_backward(&self.splats, w, h, bg, &lv.grad)?;
        for (i, n) in grads.position_grad_norm.iter().enumerate() {
            if *n > 0.0 {
                self.grad_sum[i] += n * self.diag;
                self.grad_count[i] += 1;
            }
        }
        let extra_value = match extra {
            Some(f) => f(&self.splats, &mut grads),
            None => 0.0,
        };
        let total = lv.value + extra_value;
        if !total.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                loss: total,
                last_good: Box::new(self.splats.clone()),
            });
        }
        let lr = &self.cfg.lr;
        let rates = [
            self.position_lr(),
            self.position_lr(),
            lr.log_scale,
            lr.log_scale,
            lr.rotation,
            lr.color,
            lr.color,
            lr.color,
            lr.opacity,
        ];
        self.adam.step(&mut self.splats, &grads, &rates);
        self.iteration += 1;

        let densified = if self.cfg.densify_due(self.iteration) {
            let mean: Vec<f64> = self
                .grad_sum
                .iter()
                .zip(&self.grad_count)
                .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
                .collect();
            let seed = self.rng.random();
            let res = densify_and_prune(&self.splats, &mean, &self.cfg.densify, self.diag, seed);
            self.adam.remap(&res.origins);
            self.splats = res.splats.clone();
            let n = self.splats.len();
            self.grad_sum = vec![0.0; n];
            self.grad_count = vec![0; n];
            Some(res)
        } else {
            None
        };
        self.report.loss.push(total);
        self.report.splat_count.push(self.splats.len());
        Ok(StepInfo {
            iteration: self.iteration,
            loss: total,
            extra: extra_value,
            splats: self.splats.len(),
            densified,
        })
    }

    /// Final metrics and report.
    pub fn finish(mut self) -> Result<(SplatSet, TrainReport), TrainError> {
        let image = self.render()?;
        self.report.final_metrics = Some(FinalMetrics::measure(
            self.objective.target(),
            &image,
            self.objective.config(),
        )?);
        if self.ratio_count > 0 {
            self.report.mean_grad_norm_ratio = Some(self.ratio_sum / self.ratio_count as f64);
        }
        self.report.wall_time_s = self.started.elapsed().as_secs_f64();
        Ok((self.splats, self.report))
    }
}

/// Runs a full fit.
pub fn fit(
    target: &ImageBuffer,
    init: Init,
    loss: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SplatSet, TrainReport), TrainError> {
    let mut session = FitSession::new(target.clone(), init, loss.clone(), cfg.clone(), seed)?;
    while !session.is_done() {
        session.step(None)?;
    }
    session.finish()
}
