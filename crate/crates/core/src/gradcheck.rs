//! Central finite differences for checking analytic gradients.

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest per-entry relative error.
    pub max_rel_error: f64,
    /// Entry attaining `max_rel_error`.
    pub worst: usize,
    /// `‖analytic − numeric‖₂ / ‖numeric‖₂` over the probed entries.
    pub norm_rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn passes_norm(&self, tol: f64) -> bool {
        self.norm_rel_error < tol
    }
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for each probed coordinate `i`.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    probes: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut work = x.to_vec();
    probes
        .iter()
        .map(|&i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error of each entry, measured against the larger of the two
/// magnitudes and floored at 1% of the largest numeric entry, so entries
/// that are zero up to rounding do not dominate.
pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-300);
    let mut max_rel_error = 0.0;
    let mut worst = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > max_rel_error {
            max_rel_error = err;
            worst = i;
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let size: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-300);
    let norm_rel_error = if diff.is_nan() { f64::INFINITY } else { diff / size };
    GradCheck {
        analytic,
        numeric,
        max_rel_error,
        worst,
        norm_rel_error,
    }
}

/// Checks `grad` (full analytic gradient of `f` at `x`) on `probes`.
pub fn check(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    probes: &[usize],
    h: f64,
) -> GradCheck {
    let numeric = central_differences(f, x, probes, h);
    let analytic = probes.iter().map(|&i| grad[i]).collect();
    compare(analytic, numeric)
}
