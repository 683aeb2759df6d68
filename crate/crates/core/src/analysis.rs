//! Anisotropy statistics and side-by-side reports of fitted splat sets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::image_io::{psnr, ImageBuffer, ImageError};
use crate::losses::{loss_ssim, loss_wd, LossConfig, LossError};
use crate::splat::{load_splats, render, CheckpointError, RenderError, Splat, SplatSet};

/// Eigenvalues below this are clamped up to it.
pub const EIGEN_FLOOR: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("covariance must be 2x2 or 3x3, got {0}x{1}")]
    Dimension(usize, usize),
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("no splats to analyse")]
    Empty,
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// `exp` of the Shannon entropy (natural log) of the normalized energies.
///
/// Written as `S·exp(−Σ qᵢ ln λᵢ)` with `S = Σ λ`, which equals
/// `exp(−Σ qᵢ ln qᵢ)` and is exact for equal energies.
pub fn erank_of_energies(energies: &[f64]) -> f64 {
    let lam: Vec<f64> = energies.iter().map(|v| v.max(EIGEN_FLOOR)).collect();
    let total: f64 = lam.iter().sum();
    let cross: f64 = lam.iter().map(|l| (l / total) * l.ln()).sum();
    total * (-cross).exp()
}

/// Effective rank of a symmetric positive semi-definite 2×2 or 3×3 matrix.
pub fn erank(cov: &DMatrix<f64>) -> Result<f64, AnalysisError> {
    let (r, c) = cov.shape();
    if r != c || !(2..=3).contains(&r) {
        return Err(AnalysisError::Dimension(r, c));
    }
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    let asym = (cov - cov.transpose()).amax();
    if asym > 1e-9 * scale.max(1.0) {
        return Err(AnalysisError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let min = eig.min();
    if min < -1e-9 * scale {
        return Err(AnalysisError::NotPsd(min));
    }
    if min < EIGEN_FLOOR {
        tracing::warn!(eigenvalue = min, "clamping covariance eigenvalue");
    }
    Ok(erank_of_energies(eig.as_slice()))
}

/// Effective rank of a splat's covariance, from its squared scales.
pub fn splat_erank(s: &Splat) -> f64 {
    let [a, b] = s.scales();
    erank_of_energies(&[a * a, b * b])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    /// Counts divided by the largest count.
    pub relative: Vec<f64>,
}

impl Histogram {
    /// Equal-width bins on `[lo, hi]`; the last bin includes `hi`, values
    /// outside are clamped into the end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0usize; bins];
        for v in values {
            let t = ((v - lo) / (hi - lo) * bins as f64).floor();
            let i = if t.is_nan() { 0 } else { (t.max(0.0) as usize).min(bins - 1) };
            counts[i] += 1;
        }
        let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let relative = counts.iter().map(|&c| c as f64 / max).collect();
        Self { lo, hi, counts, relative }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Two whitespace-separated columns: bin center, relative frequency.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::from("# erank relative_frequency\n");
        for (i, r) in self.relative.iter().enumerate() {
            let _ = writeln!(s, "{:.6} {:.6}", self.center(i), r);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErankResult {
    pub values: Vec<f64>,
    /// Covariance eigenvalues `s²ᵢ` per splat.
    pub energies: Vec<[f64; 2]>,
    /// `qᵢ = s²ᵢ / Σ s²ⱼ` per splat.
    pub normalized: Vec<[f64; 2]>,
    pub median: f64,
    pub mean: f64,
    pub histogram: Histogram,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-splat erank, its summary and a max-normalized histogram on [1, 2].
pub fn erank_histogram(splats: &SplatSet, bins: usize) -> Result<ErankResult, AnalysisError> {
    if splats.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    let energies: Vec<[f64; 2]> = splats
        .iter()
        .map(|s| {
            let [a, b] = s.scales();
            [a * a, b * b]
        })
        .collect();
    let normalized = energies
        .iter()
        .map(|[a, b]| {
            let t = a + b;
            [a / t, b / t]
        })
        .collect();
    let values: Vec<f64> = energies.iter().map(|e| erank_of_energies(e)).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ErankResult {
        median: median(&values),
        mean,
        histogram: Histogram::new(&values, 1.0, 2.0, bins),
        values,
        energies,
        normalized,
    })
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub splats: usize,
    /// `inf` for a perfect reconstruction.
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub wd_sigma0: f64,
    pub wd_sigma4: f64,
    pub median_erank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<ReportRow>,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,splats,psnr,ssim,wd_sigma0,wd_sigma4,median_erank\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name, r.splats, r.psnr, r.ssim, r.wd_sigma0, r.wd_sigma4, r.median_erank
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Renders each set at the target size and tabulates its metrics, in
/// input order. `loss` supplies the feature bank and SSIM settings.
pub fn compare_report(
    target: &ImageBuffer,
    sets: &[(String, SplatSet)],
    background: [f64; 3],
    loss: &LossConfig,
) -> Result<CompareReport, AnalysisError> {
    let (w, h) = (target.width(), target.height());
    let wd_at = |img: &ImageBuffer, sigma: f64| -> Result<f64, LossError> {
        let cfg = LossConfig {
            sigma,
            sigma_map: None,
            ..loss.clone()
        };
        Ok(loss_wd(target, img, &cfg)?.value)
    };
    let mut rows = Vec::with_capacity(sets.len());
    for (name, set) in sets {
        let img = render(set, w, h, background)?.image;
        let med = if set.is_empty() {
            f64::NAN
        } else {
            erank_histogram(set, DEFAULT_BINS)?.median
        };
        rows.push(ReportRow {
            name: name.clone(),
            splats: set.len(),
            psnr: psnr(target, &img)?,
            ssim: 1.0 - loss_ssim(target, &img, loss)?.value,
            wd_sigma0: wd_at(&img, 0.0)?,
            wd_sigma4: wd_at(&img, 4.0)?,
            median_erank: med,
        });
    }
    Ok(CompareReport {
        width: w,
        height: h,
        rows,
    })
}

/// [`compare_report`] over checkpoint files, named by their paths.
pub fn compare_report_files(
    target: &ImageBuffer,
    paths: &[impl AsRef<Path>],
    background: [f64; 3],
    loss: &LossConfig,
) -> Result<CompareReport, AnalysisError> {
    let sets = paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            load_splats(p)
                .map(|s| (p.display().to_string(), s))
                .map_err(|source| AnalysisError::Checkpoint {
                    path: p.to_owned(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    compare_report(target, &sets, background, loss)
}
