//! Bradley–Terry ratings on the Elo scale, pair scheduling and the vote log.
//!
//! `P(i beats j) = 1 / (1 + exp(θⱼ − θᵢ))`. Skills are fit by maximum a
//! posteriori under independent `N(0, s²)` priors with the anchor method
//! pinned at `θ = 0`, which is Elo 1000.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Elo points per unit of θ: a 400-point gap is 10:1 odds.
pub const ELO_PER_THETA: f64 = 400.0 / std::f64::consts::LN_10;
pub const ANCHOR_ELO: f64 = 1000.0;
pub const DEFAULT_PRIOR_SCALE: f64 = 2.0;
/// Newton stops once the gradient norm of the negative log posterior is below this.
pub const GRAD_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 200;
const Z95: f64 = 1.959963984540054;
/// Pairs sampled among this many best scores.
pub const TOP_K: usize = 3;
pub const VOTE_LOG_SCHEMA: &str = "splatperc-votes";
pub const VOTE_LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EloError {
    #[error("no votes")]
    Empty,
    #[error("need at least two methods, got {0}")]
    TooFewMethods(usize),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("duplicate method {0:?}")]
    DuplicateMethod(String),
    #[error("vote {0} compares a method with itself")]
    SelfComparison(usize),
    #[error("method {0:?} has no votes")]
    Unvoted(String),
    #[error("prior scale must be positive and finite, got {0}")]
    PriorScale(f64),
    #[error("Newton iteration did not converge (gradient norm {0:e})")]
    NotConverged(f64),
    #[error("{path}:{line}: {msg}")]
    Log { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
}

impl Winner {
    pub fn flipped(self) -> Self {
        match self {
            Winner::A => Winner::B,
            Winner::B => Winner::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub trial_id: String,
    pub method_a: String,
    pub method_b: String,
    pub crop_id: String,
    pub winner: Winner,
    pub rater_id: String,
    pub unix_time: u64,
}

impl VoteRecord {
    pub fn winner_loser(&self) -> (&str, &str) {
        match self.winner {
            Winner::A => (&self.method_a, &self.method_b),
            Winner::B => (&self.method_b, &self.method_a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRating {
    pub method: String,
    pub theta: f64,
    pub elo: f64,
    /// Standard error of θ (relative to the anchor).
    pub se: f64,
    /// Standard error of θ relative to the mean skill; independent of the
    /// anchor choice, used for pair scheduling.
    pub se_centered: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub wins: u64,
    pub losses: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    pub anchor: String,
    pub prior_scale: f64,
    pub votes: usize,
    /// False when the comparison graph has more than one component.
    pub connected: bool,
    pub gradient_norm: f64,
    pub methods: Vec<MethodRating>,
}

impl RatingTable {
    /// Table before any votes: every θ at 0 with the prior's spread.
    pub fn prior(methods: &[String], prior_scale: f64) -> Result<Self, EloError> {
        check_methods(methods)?;
        check_prior(prior_scale)?;
        let k = methods.len() - 1;
        let cov = DMatrix::from_diagonal_element(k, k, prior_scale * prior_scale);
        let centered = centered_se(&cov);
        let rows = methods
            .iter()
            .enumerate()
            .map(|(i, m)| rating_row(m, 0.0, if i == 0 { 0.0 } else { prior_scale }, centered[i], 0, 0))
            .collect();
        Ok(Self {
            anchor: methods[0].clone(),
            prior_scale,
            votes: 0,
            connected: methods.len() < 2,
            gradient_norm: 0.0,
            methods: rows,
        })
    }

    pub fn get(&self, method: &str) -> Option<&MethodRating> {
        self.methods.iter().find(|r| r.method == method)
    }

    /// Model probability that `i` beats `j` (row indices).
    pub fn win_probability(&self, i: usize, j: usize) -> f64 {
        sigmoid(self.methods[i].theta - self.methods[j].theta)
    }
}

/// Standard errors of `θᵢ − mean(θ)` given the covariance of the free skills.
fn centered_se(cov: &DMatrix<f64>) -> Vec<f64> {
    let n = cov.nrows() + 1;
    let c = |i: usize, j: usize| if i == 0 || j == 0 { 0.0 } else { cov[(i - 1, j - 1)] };
    let nf = n as f64;
    let total: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| c(i, j)).sum();
    (0..n)
        .map(|i| {
            let row: f64 = (0..n).map(|j| c(i, j)).sum();
            (c(i, i) - 2.0 * row / nf + total / (nf * nf)).max(0.0).sqrt()
        })
        .collect()
}

fn rating_row(method: &str, theta: f64, se: f64, se_centered: f64, wins: u64, losses: u64) -> MethodRating {
    let elo = theta_to_elo(theta);
    let half = Z95 * se * ELO_PER_THETA;
    MethodRating {
        method: method.to_owned(),
        theta,
        elo,
        se,
        se_centered,
        ci_low: elo - half,
        ci_high: elo + half,
        wins,
        losses,
    }
}

pub fn theta_to_elo(theta: f64) -> f64 {
    ANCHOR_ELO + ELO_PER_THETA * theta
}

/// How many times more often the higher-rated side is preferred.
///
/// ```
/// let r = splatperc::elo::elo_to_preference_ratio(150.0);
/// assert!((r - 2.371).abs() < 1e-3);
/// ```
pub fn elo_to_preference_ratio(delta: f64) -> f64 {
    10f64.powf(delta / 400.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_prior(s: f64) -> Result<(), EloError> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(EloError::PriorScale(s))
    }
}

fn check_methods(methods: &[String]) -> Result<(), EloError> {
    if methods.len() < 2 {
        return Err(EloError::TooFewMethods(methods.len()));
    }
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].contains(m) {
            return Err(EloError::DuplicateMethod(m.clone()));
        }
    }
    Ok(())
}

/// Methods in order of first appearance; the first is the anchor.
pub fn methods_in_order(votes: &[VoteRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in votes {
        for m in [&v.method_a, &v.method_b] {
            if !out.contains(m) {
                out.push(m.clone());
            }
        }
    }
    out
}

/// Fits with the first method to appear in `votes` as the anchor.
pub fn elo_fit(votes: &[VoteRecord], prior_scale: f64) -> Result<RatingTable, EloError> {
    if votes.is_empty() {
        return Err(EloError::Empty);
    }
    elo_fit_with(&methods_in_order(votes), votes, prior_scale)
}

/// Fits the methods in `methods`; `methods[0]` is the anchor.
pub fn elo_fit_with(methods: &[String], votes: &[VoteRecord], prior_scale: f64) -> Result<RatingTable, EloError> {
    fit_registered(methods, votes, prior_scale, true)
}

/// Like [`elo_fit_with`], but methods without votes are allowed and rated
/// by the prior alone (the graph is then reported as disconnected).
pub fn elo_fit_registered(methods: &[String], votes: &[VoteRecord], prior_scale: f64) -> Result<RatingTable, EloError> {
    fit_registered(methods, votes, prior_scale, false)
}

fn fit_registered(methods: &[String], votes: &[VoteRecord], prior_scale: f64, require_all: bool) -> Result<RatingTable, EloError> {
    check_prior(prior_scale)?;
    if votes.is_empty() {
        return Err(EloError::Empty);
    }
    check_methods(methods)?;
    let index: HashMap<&str, usize> = methods.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let n = methods.len();
    // wins[i][j]: times i beat j
    let mut wins = vec![vec![0u64; n]; n];
    for (k, v) in votes.iter().enumerate() {
        let (w, l) = v.winner_loser();
        let wi = *index.get(w).ok_or_else(|| EloError::UnknownMethod(w.to_owned()))?;
        let li = *index.get(l).ok_or_else(|| EloError::UnknownMethod(l.to_owned()))?;
        if wi == li {
            return Err(EloError::SelfComparison(k));
        }
        wins[wi][li] += 1;
    }
    for (i, m) in methods.iter().enumerate() {
        if require_all && (0..n).all(|j| wins[i][j] + wins[j][i] == 0) {
            return Err(EloError::Unvoted(m.clone()));
        }
    }
    let connected = is_connected(&wins);
    if !connected {
        tracing::warn!("comparison graph is disconnected; ratings across components rest on the prior");
    }

    let problem = Posterior {
        wins: &wins,
        inv_var: 1.0 / (prior_scale * prior_scale),
    };
    let (theta, gnorm) = problem.solve()?;
    let cov = problem
        .hessian(&theta)
        .cholesky()
        .expect("posterior Hessian is positive definite")
        .inverse();
    let centered = centered_se(&cov);

    let rows = (0..n)
        .map(|i| {
            let se = if i == 0 { 0.0 } else { cov[(i - 1, i - 1)].sqrt() };
            let w = wins[i].iter().sum();
            let l = (0..n).map(|j| wins[j][i]).sum();
            rating_row(&methods[i], theta[i], se, centered[i], w, l)
        })
        .collect();
    Ok(RatingTable {
        anchor: methods[0].clone(),
        prior_scale,
        votes: votes.len(),
        connected,
        gradient_norm: gnorm,
        methods: rows,
    })
}

fn is_connected(wins: &[Vec<u64>]) -> bool {
    let n = wins.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && wins[i][j] + wins[j][i] > 0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Negative log posterior over the free skills `θ₁..θₙ₋₁` (θ₀ = 0).
///
/// Every term is written so that swapping all winners and negating θ maps
/// each floating-point operation onto its mirror image.
struct Posterior<'a> {
    wins: &'a [Vec<u64>],
    inv_var: f64,
}

impl Posterior<'_> {
    fn n(&self) -> usize {
        self.wins.len()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let n = self.n();
        let mut f = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = theta[i] - theta[j];
                f += self.wins[i][j] as f64 * softplus(-d) + self.wins[j][i] as f64 * softplus(d);
            }
        }
        f + 0.5 * self.inv_var * theta[1..].iter().map(|t| t * t).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> DVector<f64> {
        let n = self.n();
        let mut g = vec![0.0; n];
        for i in 0..n {
            for j in i + 1..n {
                let d = theta[i] - theta[j];
                let t = self.wins[j][i] as f64 * sigmoid(d) - self.wins[i][j] as f64 * sigmoid(-d);
                g[i] += t;
                g[j] -= t;
            }
        }
        DVector::from_iterator(n - 1, (1..n).map(|i| g[i] + self.inv_var * theta[i]))
    }

    fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut h = DMatrix::zeros(n - 1, n - 1);
        for i in 0..n {
            for j in i + 1..n {
                let d = theta[i] - theta[j];
                let c = (self.wins[i][j] + self.wins[j][i]) as f64 * sigmoid(d) * sigmoid(-d);
                if i > 0 {
                    h[(i - 1, i - 1)] += c;
                    h[(i - 1, j - 1)] -= c;
                    h[(j - 1, i - 1)] -= c;
                }
                h[(j - 1, j - 1)] += c;
            }
        }
        for k in 0..n - 1 {
            h[(k, k)] += self.inv_var;
        }
        h
    }

    /// Damped Newton from θ = 0 with Armijo backtracking.
    fn solve(&self) -> Result<(Vec<f64>, f64), EloError> {
        let n = self.n();
        let mut theta = vec![0.0; n];
        let mut f = self.value(&theta);
        let mut gnorm = f64::INFINITY;
        for _ in 0..MAX_NEWTON {
            let g = self.gradient(&theta);
            gnorm = g.norm();
            if gnorm < GRAD_TOL {
                return Ok((theta, gnorm));
            }
            let step = self
                .hessian(&theta)
                .cholesky()
                .expect("posterior Hessian is positive definite")
                .solve(&g);
            let slope = g.dot(&step);
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let trial: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { theta[i] - t * step[i - 1] }).collect();
                let ft = self.value(&trial);
                // near the optimum the decrease drops below the resolution of
                // f; a full step that shrinks the gradient is then taken
                let flat = t == 1.0
                    && ft <= f + 1e-12 * (1.0 + f.abs())
                    && self.gradient(&trial).norm() < gnorm;
                if ft <= f - 1e-4 * t * slope || flat {
                    theta = trial;
                    f = ft;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                // no representable decrease left
                break;
            }
        }
        if gnorm < GRAD_TOL {
            Ok((theta, gnorm))
        } else if gnorm < 1e-6 {
            tracing::warn!(gradient_norm = gnorm, "Newton stopped above tolerance");
            let g = self.gradient(&theta).norm();
            Ok((theta, g))
        } else {
            Err(EloError::NotConverged(gnorm))
        }
    }
}

/// Information score `p(1 − p)(SEᵢ² + SEⱼ²)` of every unordered pair `i < j`.
///
/// SEs are taken relative to the mean skill: anchored SEs would make the
/// anchor look exactly known and starve its pairs. Methods with no votes
/// (`counts[i] == 0`) count with the prior scale as their standard error.
pub fn pair_scores(table: &RatingTable, counts: &[u64]) -> Vec<((usize, usize), f64)> {
    let n = table.methods.len();
    let se = |i: usize| {
        if counts.get(i).copied().unwrap_or(0) == 0 {
            table.prior_scale
        } else {
            table.methods[i].se_centered
        }
    };
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let p = table.win_probability(i, j);
            out.push(((i, j), p * (1.0 - p) * (se(i).powi(2) + se(j).powi(2))));
        }
    }
    out
}

/// Samples uniformly among the [`TOP_K`] highest-scoring pairs.
pub fn select_next_pair(table: &RatingTable, counts: &[u64], seed: u64) -> Result<(usize, usize), EloError> {
    if table.methods.len() < 2 {
        return Err(EloError::TooFewMethods(table.methods.len()));
    }
    let mut scores = pair_scores(table, counts);
    // stable: ties keep index order
    scores.sort_by(|a, b| b.1.total_cmp(&a.1));
    let k = scores.len().min(TOP_K);
    let pick = ChaCha8Rng::seed_from_u64(seed).random_range(0..k);
    Ok(scores[pick].0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteLogHeader {
    pub schema: String,
    pub version: u32,
    /// Registered methods; the first is the anchor.
    pub methods: Vec<String>,
}

impl VoteLogHeader {
    pub fn new(methods: Vec<String>) -> Self {
        Self {
            schema: VOTE_LOG_SCHEMA.to_owned(),
            version: VOTE_LOG_VERSION,
            methods,
        }
    }
}

/// Append-only newline-delimited JSON vote log.
///
/// The first line is a [`VoteLogHeader`]; every later line is one
/// [`VoteRecord`]. Each append is flushed and synced before returning.
pub struct VoteLog {
    file: File,
    path: PathBuf,
}

impl VoteLog {
    /// Opens `path`, creating it with `methods` as header if absent.
    /// Returns the log and the records already in it.
    pub fn open(path: impl AsRef<Path>, methods: &[String]) -> Result<(Self, Vec<VoteRecord>), EloError> {
        let path = path.as_ref().to_path_buf();
        let existing = path.exists() && std::fs::metadata(&path)?.len() > 0;
        let votes = if existing {
            let (header, votes) = read_vote_log(&path)?;
            if header.methods != methods {
                return Err(EloError::Log {
                    path,
                    line: 1,
                    msg: format!("log registers {:?}, expected {:?}", header.methods, methods),
                });
            }
            votes
        } else {
            Vec::new()
        };
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if !existing {
            let line = serde_json::to_string(&VoteLogHeader::new(methods.to_vec())).expect("header serializes");
            writeln!(file, "{line}")?;
            file.sync_all()?;
        }
        Ok((Self { file, path }, votes))
    }

    pub fn append(&mut self, vote: &VoteRecord) -> Result<(), EloError> {
        let line = serde_json::to_string(vote).expect("vote serializes");
        writeln!(self.file, "{line}")?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads a vote log. A log without a header line takes its methods from
/// the order of first appearance.
pub fn read_vote_log(path: impl AsRef<Path>) -> Result<(VoteLogHeader, Vec<VoteRecord>), EloError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let err = |line: usize, msg: String| EloError::Log {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut header = None;
    let mut votes = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if k == 0 {
            if let Ok(h) = serde_json::from_str::<VoteLogHeader>(&line) {
                if h.schema != VOTE_LOG_SCHEMA || h.version != VOTE_LOG_VERSION {
                    return Err(err(1, format!("unsupported schema {} v{}", h.schema, h.version)));
                }
                header = Some(h);
                continue;
            }
        }
        let v: VoteRecord = serde_json::from_str(&line).map_err(|e| err(k + 1, e.to_string()))?;
        if v.method_a == v.method_b {
            return Err(err(k + 1, "method_a equals method_b".into()));
        }
        votes.push(v);
    }
    let header = header.unwrap_or_else(|| VoteLogHeader::new(methods_in_order(&votes)));
    Ok((header, votes))
}
