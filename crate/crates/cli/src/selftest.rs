//! Finite-difference and oracle checks behind `splatperc selftest`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatperc::analysis::erank_of_energies;
use splatperc::elo::elo_to_preference_ratio;
use splatperc::gradcheck;
use splatperc::image_io::ImageBuffer;
use splatperc::losses::*;
use splatperc::ratecodec::{decode_quantized, encode_quantized, quantize, RateModel};
use splatperc::splat::{render, render_backward, Splat, SplatSet, PARAM_COUNT};

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

fn row(name: &str, started: Instant, pass: bool, detail: String) -> CheckRow {
    CheckRow {
        name: name.into(),
        pass,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

pub fn table(rows: &[CheckRow]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut s = format!("{:<w$}  result  time(s)  detail\n", "check");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:<6}  {:>7.2}  {}",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    s
}

const RW: usize = 20;
const RH: usize = 18;
const BG: [f64; 3] = [0.1, 0.2, 0.3];

fn random_scene(n: usize, rng: &mut ChaCha8Rng) -> SplatSet {
    (0..n)
        .map(|_| Splat {
            mean: [rng.random_range(2.0..RW as f64 - 2.0), rng.random_range(2.0..RH as f64 - 2.0)],
            log_scale: [rng.random_range(0.2..1.4), rng.random_range(0.2..1.4)],
            rotation: rng.random_range(-3.0..3.0),
            color_logit: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            opacity_logit: rng.random_range(-1.5..2.0),
            depth_key: rng.random(),
        })
        .collect()
}

/// Worst entry-wise relative error of the renderer gradient over `seeds` scenes.
pub fn render_gradient(n: usize, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7919 * n as u64);
        let set = random_scene(n, &mut rng);
        let upstream = ImageBuffer::from_fn(RW, RH, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let grads = render_backward(&set, RW, RH, BG, &upstream).expect("render");
        let analytic: Vec<f64> = grads.params.iter().flatten().copied().collect();
        let x: Vec<f64> = set.iter().flat_map(|s| s.params()).collect();
        let f = |x: &[f64]| {
            let s: SplatSet = set
                .iter()
                .zip(x.chunks_exact(PARAM_COUNT))
                .map(|(s, p)| Splat::from_params(p.try_into().unwrap(), s.depth_key))
                .collect();
            let img = render(&s, RW, RH, BG).expect("render").image;
            img.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let probes: Vec<usize> = (0..x.len()).collect();
        worst = worst.max(gradcheck::check(f, &x, &analytic, &probes, 1e-3).max_rel_error);
    }
    worst
}

fn loss_pair(w: usize, h: usize, seed: u64) -> (ImageBuffer, ImageBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.random_range(0.1..0.9));
    let y = ImageBuffer::from_fn(w, h, 3, |i, j, c| {
        let d: f64 = rng.random_range(0.02..0.25);
        x.get(i, j, c) + if rng.random_bool(0.5) { d } else { -d }
    });
    (x, y)
}

type LossFn = Box<dyn Fn(&ImageBuffer, &ImageBuffer) -> Result<LossValue, LossError>>;

/// Every loss with the image size its check runs at.
pub fn losses() -> Vec<(&'static str, usize, usize, LossFn)> {
    let cfg = LossConfig::default();
    let wd_cfg = LossConfig {
        sigma: 2.0,
        ..Default::default()
    };
    let wdr_cfg = LossConfig {
        gamma: 0.025,
        ..Default::default()
    };
    let (c1, c2, c3, c4, c5) = (cfg.clone(), cfg.clone(), cfg.clone(), cfg.clone(), cfg.features.clone());
    vec![
        ("l1", 16, 16, Box::new(loss_l1) as LossFn),
        ("l2", 16, 16, Box::new(loss_l2)),
        ("ssim", 20, 17, Box::new(move |x, y| loss_ssim(x, y, &c1))),
        ("ms-ssim", 48, 45, Box::new(move |x, y| loss_msssim(x, y, &c2))),
        ("feat_pointwise", 20, 18, Box::new(move |x, y| loss_feat_pointwise(x, y, &c5))),
        ("wd", 20, 18, Box::new(move |x, y| loss_wd(x, y, &wd_cfg))),
        ("wd_r", 16, 16, Box::new(move |x, y| loss_wd_r(x, y, &wdr_cfg))),
        ("original", 16, 16, Box::new(move |x, y| loss_original(x, y, &c3))),
        ("composite", 24, 24, Box::new(move |x, y| loss_composite(x, y, &c4))),
    ]
}

/// Worst `‖a − n‖/‖n‖` over 64 probes per seed at h = 1e-3.
pub fn loss_gradient(loss: &LossFn, w: usize, h: usize, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (x, y) = loss_pair(w, h, 100 + seed);
        let out = loss(&x, &y).expect("loss");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probes = sample(&mut rng, y.data().len(), 64).into_vec();
        let f = |v: &[f64]| loss(&x, &ImageBuffer::new(w, h, 3, v.to_vec()).unwrap()).unwrap().value;
        worst = worst.max(gradcheck::check(f, y.data(), out.grad.data(), &probes, 1e-3).norm_rel_error);
    }
    worst
}

fn grating(phase: f64) -> ImageBuffer {
    let amp = [1.0, 0.8, 0.6];
    ImageBuffer::from_fn(64, 64, 3, |x, y, c| {
        let (x, y) = (x as f64, y as f64);
        let s = 0.2 * (2.0 * PI * x / 8.0 + phase).sin() + 0.15 * (2.0 * PI * (x + y) / 12.0 + phase).sin();
        0.5 + amp[c] * s
    })
}

fn wd_at(x: &ImageBuffer, y: &ImageBuffer, sigma: f64) -> f64 {
    let cfg = LossConfig {
        sigma,
        ..Default::default()
    };
    loss_wd(x, y, &cfg).expect("wd").value
}

pub fn run_all(seeds: u64) -> Vec<CheckRow> {
    let mut rows = Vec::new();

    let t = Instant::now();
    let e = render_gradient(1, seeds);
    rows.push(row("render, 1 splat", t, e < 1e-4, format!("max rel err {e:.2e} < 1e-4")));
    let t = Instant::now();
    let e = render_gradient(20, seeds);
    rows.push(row("render, 20 splats", t, e < 1e-3, format!("max rel err {e:.2e} < 1e-3")));

    for (name, w, h, f) in losses() {
        let t = Instant::now();
        let e = loss_gradient(&f, w, h, seeds);
        rows.push(row(&format!("loss {name}"), t, e < 1e-4, format!("rel err {e:.2e} < 1e-4")));
    }

    let t = Instant::now();
    let (x, y) = (grating(0.0), grating(PI));
    let vals: Vec<f64> = [0.0, 1.0, 2.0, 4.0, 8.0].iter().map(|s| wd_at(&x, &y, *s)).collect();
    let ratio = vals[4] / vals[0];
    let l2 = loss_l2(&x, &y).unwrap().value;
    let ok = ratio < 0.05 && l2 > 100.0 * loss_l2(&x, &x).unwrap().value && vals.windows(2).all(|w| w[1] <= w[0]);
    rows.push(row("wd metamer", t, ok, format!("wd(8)/wd(0) = {ratio:.4}, non-increasing in σ")));

    let t = Instant::now();
    let id = erank_of_energies(&[1.0, 1.0, 1.0]);
    let (p, q) = (0.8f64, 0.2f64);
    let oracle = (-(p * p.ln()) - q * q.ln()).exp();
    let d41 = erank_of_energies(&[4.0, 1.0]);
    let ok = id == 3.0 && (d41 - oracle).abs() < 1e-12 && (d41 - 1.6493).abs() < 1e-4;
    rows.push(row("erank oracle", t, ok, format!("identity {id}, diag(4,1) {d41:.6}")));

    let t = Instant::now();
    let pairs = [(150.0, 2.37), (72.0, 1.51), (105.7, 1.84), (223.2, 3.61)];
    let worst = pairs.iter().map(|(d, r)| (elo_to_preference_ratio(*d) - r).abs()).fold(0.0, f64::max);
    rows.push(row("elo ratios", t, worst < 0.01, format!("max deviation {worst:.4} < 0.01")));

    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds);
    let set: SplatSet = (0..200)
        .map(|i| {
            let p = std::array::from_fn(|_| rng.random_range(-5.0..40.0));
            Splat::from_params(&p, i as f64)
        })
        .collect();
    let mut model = RateModel::default();
    model.match_moments(&set);
    let model = model.to_f32();
    let ok = match encode_quantized(&set, &model).and_then(|b| decode_quantized(&b)) {
        Ok((back, _)) => {
            let expect = quantize(&set, &model);
            back.iter().zip(set.depth_order()).all(|(b, i)| b.params() == expect.splats[i].params())
        }
        Err(_) => false,
    };
    rows.push(row("codec round trip", t, ok, "200 splats bit-exact".into()));
    rows
}
