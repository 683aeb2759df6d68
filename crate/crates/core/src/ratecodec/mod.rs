//! Rate model, rate–distortion fitting and the `SPQ1` quantized format.
//!
//! Every splat parameter is quantized with a per-group step `Δ` and coded
//! under a per-group Gaussian prior `N(m, s)`: the probability of index `k`
//! is the prior mass of `[kΔ − Δ/2, kΔ + Δ/2)`. During training the rounding
//! is replaced by additive uniform noise so the rate is differentiable.

mod coder;

use std::f64::consts::{FRAC_PI_2, LN_2, PI, SQRT_2};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

pub use coder::{Decoder, Encoder, FreqTable, MAX_TOTAL};

use crate::image_io::ImageBuffer;
use crate::losses::LossConfig;
use crate::splat::{render, ParamGroup, RenderError, Splat, SplatGradients, SplatSet, PARAM_COUNT};
use crate::trainer::{FinalMetrics, FitSession, Init, TrainConfig, TrainError, TrainReport};

pub const SPQ_MAGIC: [u8; 4] = *b"SPQ1";
pub const SPQ_VERSION: u32 = 1;
/// Magic, version, count, then five groups of (Δ, m, s, k_min, k_max).
pub const SPQ_HEADER_LEN: usize = 12 + 5 * 20;
/// Smallest bin probability used by the rate and the coder.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;
pub const MIN_PRIOR_SCALE: f64 = 1e-4;
pub const DEFAULT_LAMBDAS: [f64; 4] = [1.0 / 9.0, 1.0 / 27.0, 1.0 / 81.0, 1.0 / 243.0];

#[derive(Debug, Error)]
pub enum RateError {
    #[error("splat {0} has a non-finite parameter")]
    NonFinite(usize),
    #[error("invalid rate model: {0}")]
    InvalidModel(String),
    #[error("{group} alphabet of {size} symbols is too large for the coder")]
    AlphabetTooLarge { group: &'static str, size: i64 },
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Quantization step and prior of one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub step: f64,
    pub mean: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    /// Indexed like [`ParamGroup::ALL`].
    pub groups: [GroupModel; 5],
}

/// Default steps: 1/16 px, 1/64 in log-scale and radians, 1/32 in logits.
pub const DEFAULT_STEPS: [f64; 5] = [1.0 / 16.0, 1.0 / 64.0, 1.0 / 64.0, 1.0 / 32.0, 1.0 / 32.0];

impl Default for RateModel {
    fn default() -> Self {
        Self::with_steps(DEFAULT_STEPS)
    }
}

fn group_index(g: ParamGroup) -> usize {
    ParamGroup::ALL.iter().position(|&x| x == g).unwrap()
}

/// Wraps an angle into `[−π/2, π/2)`; the covariance has period π.
pub fn wrap_rotation(theta: f64) -> f64 {
    let w = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if w >= FRAC_PI_2 {
        w - PI
    } else {
        w
    }
}

/// Parameters as coded: rotation wrapped, everything else as stored.
fn coded_params(s: &Splat) -> [f64; PARAM_COUNT] {
    let mut p = s.params();
    p[4] = wrap_rotation(p[4]);
    p
}

fn phi_c(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `Φ(u) − Φ(l)` for `l ≤ u` without cancellation in either tail.
fn normal_mass(l: f64, u: f64) -> f64 {
    if l > 0.0 {
        phi_c(l) - phi_c(u)
    } else if u < 0.0 {
        phi_c(-u) - phi_c(-l)
    } else {
        1.0 - phi_c(u) - phi_c(-l)
    }
}

impl RateModel {
    /// Unit priors centered at 0 with the given steps.
    pub fn with_steps(steps: [f64; 5]) -> Self {
        Self {
            groups: steps.map(|step| GroupModel {
                step,
                mean: 0.0,
                scale: 1.0,
            }),
        }
    }

    pub fn group(&self, g: ParamGroup) -> &GroupModel {
        &self.groups[group_index(g)]
    }

    pub fn validate(&self) -> Result<(), RateError> {
        for (g, m) in ParamGroup::ALL.iter().zip(&self.groups) {
            if !(m.step > 0.0 && m.step.is_finite()) {
                return Err(RateError::InvalidModel(format!("{} step must be > 0", g.name())));
            }
            if !(m.scale >= MIN_PRIOR_SCALE && m.scale.is_finite()) || !m.mean.is_finite() {
                return Err(RateError::InvalidModel(format!(
                    "{} prior needs finite mean and scale ≥ {MIN_PRIOR_SCALE}",
                    g.name()
                )));
            }
        }
        Ok(())
    }

    /// Sets each prior to the sample mean and standard deviation of its
    /// group's coded parameters; steps are kept.
    pub fn match_moments(&mut self, splats: &SplatSet) {
        if splats.is_empty() {
            return;
        }
        for (gi, g) in ParamGroup::ALL.iter().enumerate() {
            let vals: Vec<f64> = splats
                .iter()
                .flat_map(|s| {
                    let p = coded_params(s);
                    g.range().map(move |k| p[k])
                })
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            self.groups[gi].mean = mean;
            self.groups[gi].scale = var.sqrt().max(MIN_PRIOR_SCALE);
        }
    }

    /// The model as stored in an `SPQ1` header: values rounded to f32,
    /// scales rounded up so they stay above [`MIN_PRIOR_SCALE`].
    pub fn to_f32(&self) -> Self {
        let up = |v: f64| {
            let f = v as f32;
            if f64::from(f) < v && f.is_finite() {
                f64::from(f32::from_bits(f.to_bits() + 1))
            } else {
                f64::from(f)
            }
        };
        Self {
            groups: self.groups.map(|g| GroupModel {
                step: f64::from(g.step as f32),
                mean: f64::from(g.mean as f32),
                scale: up(g.scale),
            }),
        }
    }

    /// Probability of the bin centered at `center`, floored at [`PROB_FLOOR`].
    pub fn bin_probability(&self, g: ParamGroup, center: f64) -> f64 {
        let m = self.group(g);
        let h = 0.5 * m.step;
        normal_mass((center - h - m.mean) / m.scale, (center + h - m.mean) / m.scale).max(PROB_FLOOR)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateMode {
    /// Additive uniform noise drawn from this seed.
    Train(u64),
    /// Rounding to the nearest bin center.
    Eval,
}

#[derive(Clone, Debug)]
pub struct RateOutput {
    pub bits: f64,
    /// `∂bits/∂θ` per splat (zero in eval mode).
    pub grads: SplatGradients,
    /// `∂bits/∂m` and `∂bits/∂s` per group (zero in eval mode).
    pub mean_grad: [f64; 5],
    pub scale_grad: [f64; 5],
}

/// Estimated code length of `splats` in bits under `model`.
///
/// Bins whose probability falls below [`PROB_FLOOR`] are charged the floor;
/// in train mode they pass the gradient of the continuous density instead.
pub fn rate_bits(splats: &SplatSet, model: &RateModel, mode: RateMode) -> Result<RateOutput, RateError> {
    model.validate()?;
    if let Some(i) = splats.first_non_finite() {
        return Err(RateError::NonFinite(i));
    }
    let mut rng = match mode {
        RateMode::Train(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        RateMode::Eval => None,
    };
    let mut out = RateOutput {
        bits: 0.0,
        grads: SplatGradients::zeros(splats.len()),
        mean_grad: [0.0; 5],
        scale_grad: [0.0; 5],
    };
    for (i, s) in splats.iter().enumerate() {
        let p = coded_params(s);
        for (k, &v) in p.iter().enumerate() {
            let gi = group_index(ParamGroup::of_param(k));
            let GroupModel { step, mean, scale } = model.groups[gi];
            let t = match rng.as_mut() {
                Some(r) => v + step * r.random_range(-0.5..0.5),
                None => step * (v / step).round(),
            };
            let u = (t + 0.5 * step - mean) / scale;
            let l = (t - 0.5 * step - mean) / scale;
            let mass = normal_mass(l, u);
            if mass <= PROB_FLOOR {
                out.bits -= PROB_FLOOR.log2();
                if rng.is_some() {
                    // gradient of −log₂(Δ·φ(z)/s): keeps pulling outliers in
                    // and the prior wider instead of letting it collapse
                    let z = (t - mean) / scale;
                    let dt = z / (scale * LN_2);
                    out.grads.params[i][k] += dt;
                    out.mean_grad[gi] -= dt;
                    out.scale_grad[gi] += (1.0 - z * z) / (scale * LN_2);
                }
                continue;
            }
            out.bits -= mass.log2();
            if rng.is_some() {
                let c = -1.0 / (mass * LN_2);
                let (pu, pl) = (pdf(u), pdf(l));
                let dt = c * (pu - pl) / scale;
                out.grads.params[i][k] += dt;
                out.mean_grad[gi] -= dt;
                out.scale_grad[gi] -= c * (pu * u - pl * l) / scale;
            }
        }
    }
    Ok(out)
}

/// Snaps every parameter to its bin center (rotation wrapped first).
pub fn quantize(splats: &SplatSet, model: &RateModel) -> SplatSet {
    splats
        .iter()
        .map(|s| {
            let mut p = coded_params(s);
            for (k, v) in p.iter_mut().enumerate() {
                let step = model.group(ParamGroup::of_param(k)).step;
                // + 0.0 turns −0.0 into the +0.0 that decoding produces
                *v = step * (*v / step).round() + 0.0;
            }
            Splat::from_params(&p, s.depth_key)
        })
        .collect()
}

fn freq_table(model: &RateModel, g: ParamGroup, kmin: i64, kmax: i64) -> Result<FreqTable, RateError> {
    let size = kmax - kmin + 1;
    if size > i64::from(MAX_TOTAL / 2) {
        return Err(RateError::AlphabetTooLarge { group: g.name(), size });
    }
    let step = model.group(g).step;
    let probs: Vec<f64> = (kmin..=kmax)
        .map(|k| model.bin_probability(g, k as f64 * step))
        .collect();
    let total: f64 = probs.iter().sum();
    let spare = f64::from(MAX_TOTAL) - size as f64;
    let freqs: Vec<u32> = probs.iter().map(|p| 1 + (p / total * spare).floor() as u32).collect();
    Ok(FreqTable::new(&freqs))
}

fn index_of(v: f64, step: f64) -> i64 {
    (v / step).round() as i64
}

/// Serializes `splats` to `SPQ1`: header, then the range-coded bin indices
/// of every parameter, splats in blend order.
///
/// The model is rounded to f32 first; decoding returns `Δ·round(θ/Δ)` for
/// those steps, with depth keys `0, 1, 2, …` in the stored order.
pub fn encode_quantized(splats: &SplatSet, model: &RateModel) -> Result<Vec<u8>, RateError> {
    let model = model.to_f32();
    model.validate()?;
    if let Some(i) = splats.first_non_finite() {
        return Err(RateError::NonFinite(i));
    }
    let order = splats.depth_order();
    let params: Vec<[f64; PARAM_COUNT]> = order.iter().map(|&i| coded_params(&splats.splats[i])).collect();
    let mut ranges = [(0i64, 0i64); 5];
    for (gi, g) in ParamGroup::ALL.iter().enumerate() {
        let step = model.groups[gi].step;
        let idx = params.iter().flat_map(|p| g.range().map(move |k| index_of(p[k], step)));
        let (lo, hi) = idx.fold((i64::MAX, i64::MIN), |(a, b), k| (a.min(k), b.max(k)));
        ranges[gi] = if params.is_empty() { (0, 0) } else { (lo, hi) };
        if ranges[gi].0 < i64::from(i32::MIN) || ranges[gi].1 > i64::from(i32::MAX) {
            return Err(RateError::AlphabetTooLarge {
                group: g.name(),
                size: ranges[gi].1 - ranges[gi].0 + 1,
            });
        }
    }
    let mut out = Vec::with_capacity(SPQ_HEADER_LEN + params.len() * 4);
    out.extend_from_slice(&SPQ_MAGIC);
    out.extend_from_slice(&SPQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (m, (lo, hi)) in model.groups.iter().zip(&ranges) {
        for v in [m.step, m.mean, m.scale] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(*lo as i32).to_le_bytes());
        out.extend_from_slice(&(*hi as i32).to_le_bytes());
    }
    if params.is_empty() {
        return Ok(out);
    }
    let tables = ParamGroup::ALL
        .iter()
        .zip(&ranges)
        .map(|(&g, &(lo, hi))| freq_table(&model, g, lo, hi))
        .collect::<Result<Vec<_>, _>>()?;
    let mut enc = Encoder::new();
    for p in &params {
        for (k, v) in p.iter().enumerate() {
            let gi = group_index(ParamGroup::of_param(k));
            let sym = index_of(*v, model.groups[gi].step) - ranges[gi].0;
            tables[gi].encode(&mut enc, sym as usize);
        }
    }
    out.extend(enc.finish());
    Ok(out)
}

/// Header of an `SPQ1` stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SpqHeader {
    pub count: usize,
    pub model: RateModel,
    pub index_ranges: [(i32, i32); 5],
}

fn read_header(bytes: &[u8]) -> Result<SpqHeader, RateError> {
    let corrupt = |m: &str| RateError::Corrupt(m.to_string());
    if bytes.len() < SPQ_HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    if bytes[..4] != SPQ_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let word = |o: usize| [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
    let version = u32::from_le_bytes(word(4));
    if version != SPQ_VERSION {
        return Err(RateError::Corrupt(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(word(8)) as usize;
    let mut model = RateModel::default();
    let mut index_ranges = [(0, 0); 5];
    for gi in 0..5 {
        let o = 12 + gi * 20;
        let f = |j: usize| f64::from(f32::from_le_bytes(word(o + 4 * j)));
        model.groups[gi] = GroupModel {
            step: f(0),
            mean: f(1),
            scale: f(2),
        };
        index_ranges[gi] = (i32::from_le_bytes(word(o + 12)), i32::from_le_bytes(word(o + 16)));
        if index_ranges[gi].0 > index_ranges[gi].1 {
            return Err(corrupt("empty index range"));
        }
    }
    model.validate().map_err(|e| RateError::Corrupt(e.to_string()))?;
    Ok(SpqHeader {
        count,
        model,
        index_ranges,
    })
}

pub fn decode_quantized(bytes: &[u8]) -> Result<(SplatSet, SpqHeader), RateError> {
    let header = read_header(bytes)?;
    let payload = &bytes[SPQ_HEADER_LEN..];
    if header.count == 0 {
        if !payload.is_empty() {
            return Err(RateError::Corrupt("payload after empty set".into()));
        }
        return Ok((SplatSet::default(), header));
    }
    let tables = ParamGroup::ALL
        .iter()
        .zip(&header.index_ranges)
        .map(|(&g, &(lo, hi))| freq_table(&header.model, g, i64::from(lo), i64::from(hi)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| RateError::Corrupt(e.to_string()))?;
    let mut dec = Decoder::new(payload);
    let mut splats = Vec::with_capacity(header.count.min(1 << 20));
    for i in 0..header.count {
        let mut p = [0.0; PARAM_COUNT];
        for (k, v) in p.iter_mut().enumerate() {
            let gi = group_index(ParamGroup::of_param(k));
            let sym = tables[gi].decode(&mut dec) as i64;
            *v = (sym + i64::from(header.index_ranges[gi].0)) as f64 * header.model.groups[gi].step;
        }
        if dec.overrun() {
            return Err(RateError::Corrupt("payload ended early".into()));
        }
        splats.push(Splat::from_params(&p, i as f64));
    }
    Ok((SplatSet::new(splats), header))
}

pub fn save_quantized(splats: &SplatSet, model: &RateModel, path: impl AsRef<Path>) -> Result<usize, RateError> {
    let bytes = encode_quantized(splats, model)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<(SplatSet, SpqHeader), RateError> {
    decode_quantized(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdConfig {
    /// Weight of the rate, in mean bits per splat, against the distortion.
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub steps: [f64; 5],
    /// Adam step size for the prior means (in units of the prior scale)
    /// and log-scales.
    pub prior_lr: f64,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for RdConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDAS[0],
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            steps: DEFAULT_STEPS,
            prior_lr: 1e-2,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RdConfig {
    pub fn validate(&self) -> Result<(), RateError> {
        let bad = |m: String| Err(RateError::InvalidModel(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be ≥ 0".into());
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("every sweep lambda must be ≥ 0".into());
        }
        if !(self.prior_lr > 0.0) {
            return bad("prior_lr must be > 0".into());
        }
        RateModel::with_steps(self.steps).validate()
    }
}

/// Outcome of one rate–distortion fit, measured on the decoded set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda: f64,
    pub splats: usize,
    /// Eval-mode model bits.
    pub bits: f64,
    pub bpp: f64,
    /// Mean train-mode bits over a few noise draws.
    pub train_bits: f64,
    /// Size of the `SPQ1` file and of its range-coded part.
    pub file_bytes: usize,
    pub payload_bytes: usize,
    pub metrics: FinalMetrics,
}

#[derive(Clone, Debug)]
pub struct RdResult {
    pub splats: SplatSet,
    pub model: RateModel,
    pub point: RdPoint,
    pub report: TrainReport,
}

/// Adam on the prior means (scaled by the prior scale) and log-scales.
struct PriorAdam {
    m: [[f64; 2]; 5],
    v: [[f64; 2]; 5],
    t: i32,
    lr: f64,
}

impl PriorAdam {
    fn step(&mut self, model: &mut RateModel, mean_grad: &[f64; 5], scale_grad: &[f64; 5]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        for (gi, g) in model.groups.iter_mut().enumerate() {
            let grads = [mean_grad[gi] * g.scale, scale_grad[gi] * g.scale];
            let mut d = [0.0; 2];
            for j in 0..2 {
                self.m[gi][j] = B1 * self.m[gi][j] + (1.0 - B1) * grads[j];
                self.v[gi][j] = B2 * self.v[gi][j] + (1.0 - B2) * grads[j] * grads[j];
                let mh = self.m[gi][j] / (1.0 - B1.powi(self.t));
                let vh = self.v[gi][j] / (1.0 - B2.powi(self.t));
                d[j] = self.lr * mh / (vh.sqrt() + 1e-8);
            }
            g.mean -= d[0] * g.scale;
            g.scale = (g.scale * (-d[1]).exp()).max(MIN_PRIOR_SCALE);
        }
    }
}

const TRAIN_BIT_DRAWS: u64 = 8;

/// Jointly fits splats and priors to `D + λ·R`, `R` the mean train-mode
/// code length per splat in bits.
///
/// The prior always follows the rate gradient, so `λ = 0` gives the plain
/// fit together with a prior fitted to it.
pub fn fit_rd(target: &ImageBuffer, rd: &RdConfig, seed: u64) -> Result<RdResult, RateError> {
    rd.validate()?;
    let mut session = FitSession::new(
        target.clone(),
        Init::Count(rd.train.init_count),
        rd.loss.clone(),
        rd.train.clone(),
        seed,
    )?;
    let mut model = RateModel::with_steps(rd.steps);
    model.match_moments(session.splats());
    let mut prior = PriorAdam {
        m: [[0.0; 2]; 5],
        v: [[0.0; 2]; 5],
        t: 0,
        lr: rd.prior_lr,
    };
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5a7e_c0de);
    let lambda = rd.lambda;
    let mut failure = None;
    {
        let mut extra = |splats: &SplatSet, grads: &mut SplatGradients| -> f64 {
            let out = match rate_bits(splats, &model, RateMode::Train(noise.random())) {
                Ok(o) => o,
                Err(e) => {
                    failure.get_or_insert(e);
                    return f64::NAN;
                }
            };
            let k = lambda / splats.len().max(1) as f64;
            if k > 0.0 {
                for (g, r) in grads.params.iter_mut().zip(&out.grads.params) {
                    for (a, b) in g.iter_mut().zip(r) {
                        *a += k * b;
                    }
                }
            }
            prior.step(&mut model, &out.mean_grad, &out.scale_grad);
            k * out.bits
        };
        while !session.is_done() {
            if let Err(e) = session.step(Some(&mut extra)) {
                return Err(failure.take().unwrap_or(RateError::Train(e)));
            }
        }
    }
    let (splats, report) = session.finish()?;

    // the learned prior lags behind late changes to the population; keep
    // whichever of it and the moment-matched prior codes shorter
    let mut matched = model.clone();
    matched.match_moments(&splats);
    let eval = |m: &RateModel| rate_bits(&splats, &m.to_f32(), RateMode::Eval).map(|o| o.bits);
    if !splats.is_empty() && eval(&matched)? < eval(&model)? {
        model = matched;
    }
    let model = model.to_f32();
    let point = measure_point(target, &splats, &model, lambda, &rd.train, &rd.loss, seed)?;
    Ok(RdResult {
        splats,
        model,
        point,
        report,
    })
}

fn measure_point(
    target: &ImageBuffer,
    splats: &SplatSet,
    model: &RateModel,
    lambda: f64,
    train: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<RdPoint, RateError> {
    let bits = rate_bits(splats, model, RateMode::Eval)?.bits;
    let mut train_bits = 0.0;
    for d in 0..TRAIN_BIT_DRAWS {
        train_bits += rate_bits(splats, model, RateMode::Train(seed.wrapping_add(d))).map(|o| o.bits)?;
    }
    let bytes = encode_quantized(splats, model)?;
    let (decoded, _) = decode_quantized(&bytes)?;
    let img = render(&decoded, target.width(), target.height(), train.background)?.image;
    Ok(RdPoint {
        lambda,
        splats: splats.len(),
        bits,
        bpp: bits / (target.width() * target.height()) as f64,
        train_bits: train_bits / TRAIN_BIT_DRAWS as f64,
        file_bytes: bytes.len(),
        payload_bytes: bytes.len() - SPQ_HEADER_LEN,
        metrics: FinalMetrics::measure(target, &img, loss)?,
    })
}

/// One [`fit_rd`] per λ in `rd.lambdas`, all from the same seed, ordered by
/// ascending λ.
pub fn rd_sweep(target: &ImageBuffer, rd: &RdConfig, seed: u64) -> Result<Vec<RdResult>, RateError> {
    let mut lambdas = rd.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas
        .into_iter()
        .map(|lambda| fit_rd(target, &RdConfig { lambda, ..rd.clone() }, seed))
        .collect()
}
