use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use splatperc::image_io::psnr;
use splatperc::ratecodec::*;
use splatperc::splat::{render, ParamGroup, Splat, SplatSet, PARAM_COUNT};
use splatperc::testimage::textured;
use splatperc::trainer::{fit, init_splats, Init, TrainConfig};

fn random_set(n: usize, seed: u64) -> SplatSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut p = [0.0; PARAM_COUNT];
            p[0] = rng.random_range(0.0..48.0);
            p[1] = rng.random_range(0.0..40.0);
            p[2] = rng.random_range(-0.5..2.0);
            p[3] = rng.random_range(-0.5..2.0);
            p[4] = rng.random_range(-4.0..4.0);
            for v in &mut p[5..] {
                *v = rng.random_range(-3.0..3.0);
            }
            Splat::from_params(&p, rng.random::<f64>() + i as f64 * 1e-9)
        })
        .collect()
}

fn fitted_model(set: &SplatSet) -> RateModel {
    let mut m = RateModel::default();
    m.match_moments(set);
    m
}

#[test]
fn eval_bits_match_empirical_entropy() {
    let (mean, sd, step) = (0.3, 1.7, 0.5);
    let normal = Normal::new(mean, sd).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000 / PARAM_COUNT + 1;
    let set: SplatSet = (0..n)
        .map(|_| {
            let mut p = [0.0f64; PARAM_COUNT];
            for v in &mut p {
                *v = normal.sample(&mut rng);
            }
            // rotation is held at 0 and charged separately
            p[4] = 0.0;
            Splat::from_params(&p, 0.0)
        })
        .collect();
    let mut model = RateModel::with_steps([step; 5]);
    for g in &mut model.groups {
        g.mean = mean;
        g.scale = sd;
    }
    let bits = rate_bits(&set, &model, RateMode::Eval).unwrap().bits;

    let mut hist: HashMap<i64, usize> = HashMap::new();
    let mut count = 0usize;
    for s in set.iter() {
        for (k, v) in s.params().iter().enumerate() {
            if k == 4 {
                continue;
            }
            *hist.entry((v / step).round() as i64).or_default() += 1;
            count += 1;
        }
    }
    let entropy: f64 = hist
        .values()
        .map(|&c| {
            let p = c as f64 / count as f64;
            -p * p.log2()
        })
        .sum();
    let rot = -(n as f64) * model.bin_probability(ParamGroup::Rotation, 0.0).log2();
    let per_param = (bits - rot) / count as f64;
    assert!((per_param / entropy - 1.0).abs() < 0.02, "{per_param} vs {entropy}");
}

#[test]
fn train_gradients_match_finite_differences() {
    let set = random_set(12, 3);
    let mut model = fitted_model(&set);
    model.groups[1].scale *= 0.7;
    let seed = 44;
    let out = rate_bits(&set, &model, RateMode::Train(seed)).unwrap();
    let h = 1e-6;
    for i in 0..set.len() {
        for k in 0..PARAM_COUNT {
            let eval = |d: f64| {
                let mut s = set.clone();
                let mut p = s.splats[i].params();
                p[k] += d;
                s.splats[i].set_params(&p);
                rate_bits(&s, &model, RateMode::Train(seed)).unwrap().bits
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = out.grads.params[i][k];
            assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "splat {i} param {k}: {a} vs {fd}");
        }
    }
    for g in 0..5 {
        for which in 0..2 {
            let eval = |d: f64| {
                let mut m = model.clone();
                if which == 0 {
                    m.groups[g].mean += d;
                } else {
                    m.groups[g].scale += d;
                }
                rate_bits(&set, &m, RateMode::Train(seed)).unwrap().bits
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = if which == 0 { out.mean_grad[g] } else { out.scale_grad[g] };
            assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "group {g} {which}: {a} vs {fd}");
        }
    }
}

#[test]
fn round_trip_is_bit_exact_and_tight() {
    for seed in 0..5 {
        let set = random_set(300, seed);
        let model = fitted_model(&set);
        let bytes = encode_quantized(&set, &model).unwrap();
        let (back, header) = decode_quantized(&bytes).unwrap();
        assert_eq!(header.model, model.to_f32());
        let stored = model.to_f32();
        let expect = quantize(&set, &stored);
        let order = set.depth_order();
        assert_eq!(back.len(), set.len());
        for (j, &i) in order.iter().enumerate() {
            for (a, b) in back.splats[j].params().iter().zip(expect.splats[i].params()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(back.splats[j].depth_key, j as f64);
        }
        let bits = rate_bits(&set, &stored, RateMode::Eval).unwrap().bits;
        let payload = bytes.len() - SPQ_HEADER_LEN;
        assert!(payload <= bits.ceil() as usize / 8 + 64, "{payload} vs {bits}");
    }
}

#[test]
fn decoded_set_renders_like_the_quantized_set() {
    let set = random_set(60, 9);
    let model = fitted_model(&set).to_f32();
    let (back, _) = decode_quantized(&encode_quantized(&set, &model).unwrap()).unwrap();
    let a = render(&quantize(&set, &model), 48, 40, [0.0; 3]).unwrap().image;
    let b = render(&back, 48, 40, [0.0; 3]).unwrap().image;
    assert_eq!(a, b);
}

#[test]
fn empty_set_is_header_only() {
    let bytes = encode_quantized(&SplatSet::default(), &RateModel::default()).unwrap();
    assert_eq!(bytes.len(), SPQ_HEADER_LEN);
    let (back, header) = decode_quantized(&bytes).unwrap();
    assert!(back.is_empty());
    assert_eq!(header.count, 0);
}

#[test]
fn corrupt_streams_are_rejected() {
    let set = random_set(40, 2);
    let bytes = encode_quantized(&set, &fitted_model(&set)).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_quantized(&bad), Err(RateError::Corrupt(_))));
    assert!(matches!(decode_quantized(&bytes[..50]), Err(RateError::Corrupt(_))));
    assert!(matches!(decode_quantized(&bytes[..SPQ_HEADER_LEN + 3]), Err(RateError::Corrupt(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_quantized(&bad), Err(RateError::Corrupt(_))));
}

#[test]
fn rate_ignores_order() {
    let set = random_set(50, 4);
    let model = fitted_model(&set);
    let mut rev = set.clone();
    rev.splats.reverse();
    let a = rate_bits(&set, &model, RateMode::Eval).unwrap().bits;
    let b = rate_bits(&rev, &model, RateMode::Eval).unwrap().bits;
    assert!((a - b).abs() < 1e-9 * a);
    let bytes_a = encode_quantized(&set, &model).unwrap();
    let bytes_b = encode_quantized(&rev, &model).unwrap();
    // same blend order after sorting by depth key
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn finer_steps_render_closer() {
    let target = textured(32);
    let set = init_splats(&target, 80, 1);
    let cfg = TrainConfig {
        iterations: 150,
        ..Default::default()
    };
    let (set, _) = fit(&target, Init::Splats(set), &Default::default(), &cfg, 1).unwrap();
    let reference = render(&set, 32, 32, [0.0; 3]).unwrap().image;
    let mut last = 0.0;
    for k in 0..5 {
        let steps = DEFAULT_STEPS.map(|s| s * 4.0 / f64::from(1 << k));
        let mut model = RateModel::with_steps(steps);
        model.match_moments(&set);
        let (back, _) = decode_quantized(&encode_quantized(&set, &model).unwrap()).unwrap();
        let p = psnr(&reference, &render(&back, 32, 32, [0.0; 3]).unwrap().image).unwrap();
        assert!(p > last, "step ladder {k}: {p} ≤ {last}");
        last = p;
    }
}

#[test]
fn non_finite_parameters_are_rejected() {
    let mut set = random_set(3, 0);
    set.splats[1].rotation = f64::NAN;
    assert!(matches!(rate_bits(&set, &RateModel::default(), RateMode::Eval), Err(RateError::NonFinite(1))));
    assert!(matches!(encode_quantized(&set, &RateModel::default()), Err(RateError::NonFinite(1))));
}

fn small_rd(lambda: f64) -> RdConfig {
    let mut rd = RdConfig {
        lambda,
        ..Default::default()
    };
    rd.train = TrainConfig {
        iterations: 200,
        init_count: 60,
        ..Default::default()
    };
    rd.train.densify.max_splats = 60;
    rd
}

#[test]
fn zero_lambda_is_a_plain_fit() {
    let target = textured(32);
    let rd = small_rd(0.0);
    let r = fit_rd(&target, &rd, 6).unwrap();
    let (plain, _) = fit(&target, Init::Count(60), &rd.loss, &rd.train, 6).unwrap();
    assert_eq!(r.splats, plain);
    // distortion of the unquantized fit equals the plain fit's
    let p = psnr(&target, &render(&plain, 32, 32, [0.0; 3]).unwrap().image).unwrap();
    assert_eq!(r.report.final_metrics.unwrap().psnr, p);
    assert!((r.point.metrics.psnr - p).abs() / p < 0.01);
}

#[test]
fn extreme_lambda_codes_shorter() {
    let target = textured(32);
    let lo = fit_rd(&target, &small_rd(1.0 / 243.0), 2).unwrap();
    let hi = fit_rd(&target, &small_rd(1e3), 2).unwrap();
    assert!(hi.point.bits < lo.point.bits, "{} vs {}", hi.point.bits, lo.point.bits);
    for r in [&lo, &hi] {
        let rel = (r.point.train_bits - r.point.bits).abs() / r.point.bits;
        assert!(rel < 0.1, "train/eval gap {rel}");
        assert!(r.point.payload_bytes <= r.point.bits.ceil() as usize / 8 + 64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn any_set_round_trips(n in 0usize..40, seed in any::<u64>()) {
        let set = random_set(n, seed);
        let model = fitted_model(&set).to_f32();
        let (back, _) = decode_quantized(&encode_quantized(&set, &model).unwrap()).unwrap();
        let expect = quantize(&set, &model);
        for (j, &i) in set.depth_order().iter().enumerate() {
            prop_assert_eq!(back.splats[j].params(), expect.splats[i].params());
        }
        for g in ParamGroup::ALL {
            prop_assert!(model.group(g).scale >= MIN_PRIOR_SCALE);
        }
    }
}
