use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatperc::image_io::{psnr, ImageBuffer};
use splatperc::losses::{LossConfig, LossKind};
use splatperc::splat::{render, Splat, SplatSet};
use splatperc::testimage::textured;
use splatperc::trainer::*;

fn blob_target() -> ImageBuffer {
    let mut s = Splat::isotropic([20.0, 26.0], 1.0, [0.9, 0.4, 0.2], 0.9, 0.5);
    s.log_scale = [6f64.ln(), 3f64.ln()];
    s.rotation = 0.4;
    render(&SplatSet::new(vec![s]), 48, 48, [0.2; 3]).unwrap().image
}

/// Off in position, shape, color and opacity.
fn rough_guess() -> SplatSet {
    SplatSet::new(vec![Splat::isotropic([25.0, 21.0], 4.0, [0.5; 3], 0.5, 0.0)])
}

#[test]
fn single_blob_is_recovered() {
    let target = blob_target();
    let cfg = TrainConfig {
        iterations: 500,
        densify_stop_fraction: 0.0,
        background: [0.2; 3],
        ..Default::default()
    };
    let (splats, report) = fit(&target, Init::Splats(rough_guess()), &LossConfig::default(), &cfg, 1).unwrap();
    assert_eq!(splats.len(), 1);
    let img = render(&splats, 48, 48, [0.2; 3]).unwrap().image;
    let p = psnr(&target, &img).unwrap();
    assert!(p > 35.0, "psnr {p}");
    assert_eq!(report.final_metrics.unwrap().psnr, p);
    assert_eq!(report.loss.len(), 500);
    assert_eq!(report.splat_count.len(), 500);
}

#[test]
fn zero_iterations_returns_init() {
    let target = textured(32);
    let init = init_splats(&target, 20, 9);
    let cfg = TrainConfig {
        iterations: 0,
        ..Default::default()
    };
    let (out, report) = fit(&target, Init::Splats(init.clone()), &LossConfig::default(), &cfg, 3).unwrap();
    assert_eq!(out, init);
    assert!(report.loss.is_empty());
}

#[test]
fn fixed_seed_is_bit_identical() {
    let target = textured(32);
    let loss = LossConfig::with_kind(LossKind::WdR);
    let cfg = TrainConfig {
        iterations: 120,
        init_count: 40,
        ..Default::default()
    };
    let run = || fit(&target, Init::Count(40), &loss, &cfg, 17).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    let bits = |r: &TrainReport| r.loss.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(ra.splat_count, rb.splat_count);
}

#[test]
fn splat_count_never_exceeds_cap() {
    let target = textured(32);
    let mut cfg = TrainConfig {
        iterations: 400,
        densify_interval: 20,
        ..Default::default()
    };
    cfg.densify.max_splats = 70;
    cfg.densify.grad_threshold = 1e-6;
    let (out, report) = fit(&target, Init::Count(30), &LossConfig::default(), &cfg, 5).unwrap();
    assert!(report.splat_count.iter().all(|&n| n <= 70));
    assert!(report.splat_count.iter().any(|&n| n > 30), "densification never ran");
    assert!(out.len() <= 70);
}

#[test]
fn warmup_loss_decreases_by_window() {
    let target = textured(32);
    let cfg = TrainConfig {
        iterations: 600,
        warmup_iterations: Some(600),
        densify_stop_fraction: 0.0,
        ..Default::default()
    };
    let (_, report) = fit(&target, Init::Count(60), &LossConfig::with_kind(LossKind::Wd), &cfg, 2).unwrap();
    let means: Vec<f64> = report.loss.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
}

#[test]
fn densify_runs_only_on_schedule() {
    let target = textured(32);
    let cfg = TrainConfig {
        iterations: 200,
        warmup_iterations: Some(20),
        densify_interval: 30,
        densify_stop_fraction: 0.5,
        ..Default::default()
    };
    let mut session = FitSession::new(target, Init::Count(20), LossConfig::default(), cfg, 4).unwrap();
    let mut when = Vec::new();
    while !session.is_done() {
        let info = session.step(None).unwrap();
        if info.densified.is_some() {
            when.push(info.iteration);
        }
    }
    assert_eq!(when, vec![50, 80]);
}

#[test]
fn init_on_constant_image() {
    let target = ImageBuffer::filled(16, 12, 3, 0.3);
    let s = init_splats(&target, 1, 0);
    assert_eq!(s.len(), 1);
    let p = s.splats[0];
    for c in p.rgb() {
        assert!((c - 0.3).abs() < 1e-12);
    }
    assert!((p.opacity() - 0.5).abs() < 1e-15);
    let [a, b] = p.scales();
    assert!((a - 20.0).abs() < 1e-12 && (b - 20.0).abs() < 1e-12);
    assert_eq!(init_splats(&target, 5, 8), init_splats(&target, 5, 8));
}

#[test]
fn init_colors_follow_region_areas() {
    // left 30% black, rest white
    let target = ImageBuffer::from_fn(50, 20, 3, |x, _, _| if x < 15 { 0.0 } else { 1.0 });
    let s = init_splats(&target, 10_000, 11);
    let dark = s.iter().filter(|p| p.rgb()[0] < 0.5).count() as f64 / 1e4;
    // binomial sd ≈ 0.0046
    assert!((dark - 0.3).abs() < 0.02, "{dark}");
    for p in s.iter() {
        assert!(p.mean[0] >= 0.0 && p.mean[0] < 50.0 && p.mean[1] >= 0.0 && p.mean[1] < 20.0);
    }
}

#[test]
fn densify_matches_rule_by_rule_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let diag = 100.0;
    for trial in 0..20 {
        let n = rng.random_range(20..200);
        let splats: SplatSet = (0..n)
            .map(|i| {
                let mut s = Splat::isotropic(
                    [rng.random_range(0.0..70.0), rng.random_range(0.0..70.0)],
                    1.0,
                    [0.5; 3],
                    rng.random_range(0.0..0.02),
                    i as f64,
                );
                s.log_scale = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
                s
            })
            .collect();
        let grads: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4e-4)).collect();
        let cfg = DensifyConfig {
            max_splats: rng.random_range(n..2 * n),
            ..Default::default()
        };
        let r = densify_and_prune(&splats, &grads, &cfg, diag, trial);

        let keep: Vec<usize> = (0..n).filter(|&i| splats.splats[i].opacity() >= cfg.prune_opacity_threshold).collect();
        let mut cand: Vec<usize> = keep.iter().copied().filter(|&i| grads[i] > cfg.grad_threshold).collect();
        cand.sort_by(|&a, &b| grads[b].partial_cmp(&grads[a]).unwrap());
        cand.truncate(cfg.max_splats - keep.len());
        let big = |i: usize| {
            let [a, b] = splats.splats[i].scales();
            a.max(b) > 0.01 * diag
        };
        let splits = cand.iter().filter(|&&i| big(i)).count();
        let clones = cand.len() - splits;
        let pruned = n - keep.len();

        assert_eq!((r.pruned, r.cloned, r.split), (pruned, clones, splits));
        assert_eq!(r.splats.len(), n + clones + splits - pruned);
        assert!(r.splats.len() <= cfg.max_splats);
        assert_eq!(r.origins.len(), r.splats.len());
    }
}
