use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatperc::gradcheck;
use splatperc::image_io::ImageBuffer;
use splatperc::losses::*;

const SEEDS: u64 = 20;
const PROBES: usize = 64;
/// Step of the specified check; its truncation error near rectifier
/// zero crossings (smoothing width 1e-3) is O(1), so it is scored over the
/// whole probe vector.
const H: f64 = 1e-3;
/// Fine step for the entry-wise check.
const H_FINE: f64 = 1e-5;
const FINE_SEEDS: u64 = 5;

/// A target and a render that differ by at least 0.02 everywhere, keeping
/// the L1 kink away from the probes.
fn pair(w: usize, h: usize, seed: u64) -> (ImageBuffer, ImageBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.random_range(0.1..0.9));
    let y = ImageBuffer::from_fn(w, h, 3, |i, j, c| {
        let d: f64 = rng.random_range(0.02..0.25);
        x.get(i, j, c) + if rng.random_bool(0.5) { d } else { -d }
    });
    (x, y)
}

fn check_loss(
    name: &str,
    w: usize,
    h: usize,
    tol: f64,
    loss: impl Fn(&ImageBuffer, &ImageBuffer) -> Result<LossValue, LossError>,
) {
    let (mut worst_norm, mut worst_entry) = (0.0f64, 0.0f64);
    for seed in 0..SEEDS {
        let (x, y) = pair(w, h, 100 + seed);
        let out = loss(&x, &y).unwrap();
        assert!(out.value >= 0.0 && out.value.is_finite(), "{name}: value {}", out.value);
        assert_eq!(loss(&x, &x).unwrap().value, 0.0, "{name}: nonzero at x = x̂");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probes = sample(&mut rng, y.data().len(), PROBES).into_vec();
        let f = |v: &[f64]| {
            let img = ImageBuffer::new(w, h, 3, v.to_vec()).unwrap();
            loss(&x, &img).unwrap().value
        };
        let coarse = gradcheck::check(f, y.data(), out.grad.data(), &probes, H);
        let coarse_ok = coarse.passes_norm(tol);
        assert!(coarse_ok, "{name} seed {seed}: h={H} rel err {}", coarse.norm_rel_error);
        worst_norm = worst_norm.max(coarse.norm_rel_error);
        if seed >= FINE_SEEDS {
            continue;
        }
        let fine = gradcheck::check(f, y.data(), out.grad.data(), &probes, H_FINE);
        worst_entry = worst_entry.max(fine.max_rel_error);
        assert!(
            fine.passes(tol),
            "{name} seed {seed}: h={H_FINE} entry rel err {} (analytic {}, numeric {})",
            fine.max_rel_error,
            fine.analytic[fine.worst],
            fine.numeric[fine.worst]
        );
    }
    eprintln!("{name}: h={H} {worst_norm:.2e}, h={H_FINE} per entry {worst_entry:.2e}");
}

#[test]
fn l1_gradient() {
    check_loss("l1", 16, 16, 1e-5, loss_l1);
}

#[test]
fn l2_gradient() {
    check_loss("l2", 16, 16, 1e-5, loss_l2);
}

#[test]
fn ssim_gradient() {
    let cfg = LossConfig::default();
    check_loss("ssim", 20, 17, 1e-4, |x, y| loss_ssim(x, y, &cfg));
}

#[test]
fn msssim_gradient() {
    let cfg = LossConfig::default();
    // three scales
    check_loss("msssim", 48, 45, 1e-4, |x, y| loss_msssim(x, y, &cfg));
}

#[test]
fn feat_pointwise_gradient() {
    let bank = LossConfig::default().features;
    check_loss("feat_pointwise", 20, 18, 1e-4, |x, y| loss_feat_pointwise(x, y, &bank));
}

#[test]
fn wd_gradient() {
    let cfg = LossConfig {
        sigma: 2.0,
        ..Default::default()
    };
    check_loss("wd", 20, 18, 1e-4, |x, y| loss_wd(x, y, &cfg));
}

#[test]
fn wd_sigma_map_gradient() {
    let map = SigmaMap::from_image(&ImageBuffer::from_fn(20, 18, 1, |x, _, _| 1.0 + (x % 3) as f64 / 2.0), 1.5).unwrap();
    let cfg = LossConfig {
        sigma_map: Some(map),
        ..Default::default()
    };
    check_loss("wd_sigma_map", 20, 18, 1e-4, |x, y| loss_wd(x, y, &cfg));
}

#[test]
fn original_gradient() {
    let cfg = LossConfig::default();
    check_loss("original", 16, 16, 1e-4, |x, y| loss_original(x, y, &cfg));
}

#[test]
fn composite_gradient() {
    let cfg = LossConfig::default();
    check_loss("composite", 24, 24, 1e-4, |x, y| loss_composite(x, y, &cfg));
}

#[test]
fn wd_r_gradient() {
    let cfg = LossConfig {
        gamma: 0.025,
        ..Default::default()
    };
    check_loss("wd_r", 16, 16, 1e-4, |x, y| loss_wd_r(x, y, &cfg));
}
