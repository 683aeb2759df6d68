//! Blind A/B preference study over HTTP.
//!
//! Each trial shows a reference crop and the same crop from two methods in
//! random left/right order. Votes go to an append-only log and the Elo
//! table is refit in the background every [`StudyConfig::refit_every`] votes.
//!
//! | endpoint | |
//! |---|---|
//! | `GET /api/next?rater=ID` | `{trial_id, reference, image_a, image_b, deadline}`, 410 once the trial budget is spent |
//! | `POST /api/vote` | `{trial_id, choice: "a" \| "b"}` → 204, 404 unknown, 409 duplicate, 400 malformed |
//! | `GET /api/ratings` | rating table plus `votes_recorded` |
//! | `GET /crops/{id}.png` | crop images |

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splatperc::elo::{elo_fit_registered, select_next_pair, EloError, RatingTable, VoteLog, VoteRecord, Winner};
use splatperc::image_io::{encode_png, load_image, sample_crop_in, CropSpec, ImageBuffer, ImageError};
use thiserror::Error;
use tokio::task::JoinHandle;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSource {
    pub name: String,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// The first method is the Elo anchor.
    pub methods: Vec<MethodSource>,
    pub reference_dir: PathBuf,
    pub vote_log: PathBuf,
    #[serde(default = "default_crop_side")]
    pub crop_side: usize,
    /// Trials to issue in total; unlimited when absent.
    #[serde(default)]
    pub trial_budget: Option<usize>,
    #[serde(default = "default_prior_scale")]
    pub prior_scale: f64,
    #[serde(default = "default_refit_every")]
    pub refit_every: usize,
    /// Seconds a rater is given per trial; advisory.
    #[serde(default = "default_deadline")]
    pub deadline_secs: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_crop_side() -> usize {
    704
}
fn default_prior_scale() -> f64 {
    splatperc::elo::DEFAULT_PRIOR_SCALE
}
fn default_refit_every() -> usize {
    25
}
fn default_deadline() -> u64 {
    600
}

impl StudyConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, StudyError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| StudyError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("view {view}: {msg}")]
    View { view: String, msg: String },
    #[error(transparent)]
    Elo(#[from] EloError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrialPayload {
    pub trial_id: String,
    pub reference: String,
    pub image_a: String,
    pub image_b: String,
    /// Unix seconds.
    pub deadline: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoteBody {
    pub trial_id: String,
    pub choice: Winner,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatingsResponse {
    /// Votes stored so far; the table may lag by up to `refit_every`.
    pub votes_recorded: usize,
    #[serde(flatten)]
    pub table: RatingTable,
}

/// One issued trial. `shown_a` is the method displayed as image A.
#[derive(Clone, Debug)]
struct TrialPlan {
    shown_a: usize,
    shown_b: usize,
    view: usize,
    crop_id: String,
    rater_id: String,
    crop_ids: [String; 3],
}

struct Inner {
    rng: ChaCha8Rng,
    pending: HashMap<String, TrialPlan>,
    voted: HashSet<String>,
    crops: HashMap<String, Arc<Vec<u8>>>,
    log: VoteLog,
    votes: Vec<VoteRecord>,
    counts: Vec<u64>,
    table: Arc<RatingTable>,
    issued: usize,
    images: HashMap<(usize, usize), Arc<ImageBuffer>>,
    refits: Vec<JoinHandle<()>>,
}

/// Shared service state.
pub struct Study {
    methods: Vec<String>,
    sources: Vec<PathBuf>,
    reference_dir: PathBuf,
    views: Vec<String>,
    crop_side: usize,
    trial_budget: Option<usize>,
    prior_scale: f64,
    refit_every: usize,
    deadline_secs: u64,
    inner: Mutex<Inner>,
}

/// File names present in the reference directory and every method directory.
fn aligned_views(reference: &Path, dirs: &[PathBuf]) -> Result<Vec<String>, StudyError> {
    let mut views = Vec::new();
    for entry in std::fs::read_dir(reference)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "ppm" | "pgm")) {
            continue;
        }
        if dirs.iter().all(|d| d.join(&name).is_file()) {
            views.push(name);
        } else {
            tracing::warn!(view = %name, "skipping view missing from a method directory");
        }
    }
    views.sort();
    Ok(views)
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Study {
    /// Loads the config, scans views and replays any existing vote log.
    pub fn open(config: StudyConfig) -> Result<Arc<Self>, StudyError> {
        if config.methods.len() < 2 {
            return Err(StudyError::Config("need at least two methods".into()));
        }
        if config.crop_side == 0 || config.refit_every == 0 {
            return Err(StudyError::Config("crop_side and refit_every must be positive".into()));
        }
        let methods: Vec<String> = config.methods.iter().map(|m| m.name.clone()).collect();
        let sources: Vec<PathBuf> = config.methods.iter().map(|m| m.dir.clone()).collect();
        let views = aligned_views(&config.reference_dir, &sources)?;
        if views.is_empty() {
            return Err(StudyError::Config("no view is present in every directory".into()));
        }
        let (log, votes) = VoteLog::open(&config.vote_log, &methods)?;
        let mut counts = vec![0u64; methods.len()];
        for v in &votes {
            for m in [&v.method_a, &v.method_b] {
                if let Some(i) = methods.iter().position(|x| x == m) {
                    counts[i] += 1;
                }
            }
        }
        let table = if votes.is_empty() {
            RatingTable::prior(&methods, config.prior_scale)?
        } else {
            elo_fit_registered(&methods, &votes, config.prior_scale)?
        };
        tracing::info!(views = views.len(), votes = votes.len(), "study opened");
        let voted = votes.iter().map(|v| v.trial_id.clone()).collect();
        Ok(Arc::new(Self {
            methods,
            sources,
            reference_dir: config.reference_dir,
            views,
            crop_side: config.crop_side,
            trial_budget: config.trial_budget,
            prior_scale: config.prior_scale,
            refit_every: config.refit_every,
            deadline_secs: config.deadline_secs,
            inner: Mutex::new(Inner {
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                pending: HashMap::new(),
                voted,
                crops: HashMap::new(),
                log,
                votes,
                counts,
                table: Arc::new(table),
                issued: 0,
                images: HashMap::new(),
                refits: Vec::new(),
            }),
        }))
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn views(&self) -> &[String] {
        &self.views
    }

    /// Last committed rating table.
    pub fn ratings(&self) -> RatingsResponse {
        let inner = self.inner.lock().unwrap();
        RatingsResponse {
            votes_recorded: inner.votes.len(),
            table: (*inner.table).clone(),
        }
    }

    pub fn votes(&self) -> Vec<VoteRecord> {
        self.inner.lock().unwrap().votes.clone()
    }

    /// Waits for background refits, then commits a fit of every stored vote.
    pub async fn settle(self: &Arc<Self>) -> Result<(), StudyError> {
        let handles = std::mem::take(&mut self.inner.lock().unwrap().refits);
        for h in handles {
            let _ = h.await;
        }
        let votes = self.votes();
        if !votes.is_empty() {
            let study = Arc::clone(self);
            let table = tokio::task::spawn_blocking(move || elo_fit_registered(&study.methods, &votes, study.prior_scale))
                .await
                .expect("refit task panicked")?;
            self.commit(table);
        }
        Ok(())
    }

    fn commit(&self, table: RatingTable) {
        let mut inner = self.inner.lock().unwrap();
        if table.votes >= inner.table.votes {
            inner.table = Arc::new(table);
        }
    }

    /// `slot` 0 is the reference, otherwise method `slot − 1`.
    fn image(&self, inner: &mut Inner, view: usize, slot: usize) -> Result<Arc<ImageBuffer>, StudyError> {
        if let Some(img) = inner.images.get(&(view, slot)) {
            return Ok(Arc::clone(img));
        }
        let dir = if slot == 0 { &self.reference_dir } else { &self.sources[slot - 1] };
        let img = Arc::new(load_image(dir.join(&self.views[view]))?.to_rgb());
        inner.images.insert((view, slot), Arc::clone(&img));
        Ok(img)
    }

    fn token(rng: &mut ChaCha8Rng) -> String {
        format!("{:016x}{:016x}", rng.next_u64(), rng.next_u64())
    }

    /// Plans a trial and renders its three crops.
    pub fn next_trial(&self, rater: &str) -> Result<Option<TrialPayload>, StudyError> {
        let mut guard = self.inner.lock().unwrap();
        let inner = &mut *guard;
        if self.trial_budget.is_some_and(|b| inner.issued >= b) {
            return Ok(None);
        }
        let (i, j) = select_next_pair(&inner.table, &inner.counts, inner.rng.next_u64())?;
        let view = inner.rng.random_range(0..self.views.len());
        let reference = self.image(inner, view, 0)?;
        let a = self.image(inner, view, i + 1)?;
        let b = self.image(inner, view, j + 1)?;
        let (w, h) = (reference.width(), reference.height());
        if [&a, &b].iter().any(|m| m.width() != w || m.height() != h) {
            return Err(StudyError::View {
                view: self.views[view].clone(),
                msg: "method render size differs from the reference".into(),
            });
        }
        let side = self.crop_side.min(w).min(h);
        let crop: CropSpec = sample_crop_in(w, h, inner.rng.next_u64(), side)?;
        let (shown_a, shown_b) = if inner.rng.random_bool(0.5) { (j, i) } else { (i, j) };

        let trial_id = Self::token(&mut inner.rng);
        let crop_ids = [(); 3].map(|_| Self::token(&mut inner.rng));
        for (id, img) in crop_ids.iter().zip([&reference, if shown_a == i { &a } else { &b }, if shown_a == i { &b } else { &a }]) {
            inner.crops.insert(id.clone(), Arc::new(encode_png(&crop.apply(img)?)?));
        }
        let crop_id = format!(
            "{}@{},{}+{}{}",
            self.views[view],
            crop.origin_x,
            crop.origin_y,
            crop.side,
            if crop.flip_horizontal { "f" } else { "" }
        );
        let payload = TrialPayload {
            trial_id: trial_id.clone(),
            reference: format!("/crops/{}.png", crop_ids[0]),
            image_a: format!("/crops/{}.png", crop_ids[1]),
            image_b: format!("/crops/{}.png", crop_ids[2]),
            deadline: now_secs() + self.deadline_secs,
        };
        inner.pending.insert(
            trial_id,
            TrialPlan {
                shown_a,
                shown_b,
                view,
                crop_id,
                rater_id: rater.to_owned(),
                crop_ids,
            },
        );
        inner.issued += 1;
        Ok(Some(payload))
    }

    /// Stores a vote; schedules a refit every `refit_every` votes.
    pub fn vote(self: &Arc<Self>, body: &VoteBody) -> Result<(), VoteError> {
        let mut guard = self.inner.lock().unwrap();
        let inner = &mut *guard;
        if inner.voted.contains(&body.trial_id) {
            return Err(VoteError::Duplicate);
        }
        let Some(plan) = inner.pending.get(&body.trial_id) else {
            return Err(VoteError::UnknownTrial);
        };
        let record = VoteRecord {
            trial_id: body.trial_id.clone(),
            method_a: self.methods[plan.shown_a].clone(),
            method_b: self.methods[plan.shown_b].clone(),
            crop_id: plan.crop_id.clone(),
            winner: body.choice,
            rater_id: plan.rater_id.clone(),
            unix_time: now_secs(),
        };
        inner.log.append(&record).map_err(VoteError::Store)?;
        let plan = inner.pending.remove(&body.trial_id).expect("checked above");
        tracing::debug!(view = plan.view, "vote stored");
        for id in &plan.crop_ids {
            inner.crops.remove(id);
        }
        inner.counts[plan.shown_a] += 1;
        inner.counts[plan.shown_b] += 1;
        inner.voted.insert(record.trial_id.clone());
        inner.votes.push(record);
        if inner.votes.len().is_multiple_of(self.refit_every) {
            let votes = inner.votes.clone();
            let study = Arc::clone(self);
            inner.refits.retain(|h| !h.is_finished());
            inner.refits.push(tokio::task::spawn_blocking(move || {
                match elo_fit_registered(&study.methods, &votes, study.prior_scale) {
                    Ok(t) => study.commit(t),
                    Err(e) => tracing::error!(error = %e, "refit failed"),
                }
            }));
        }
        Ok(())
    }

    pub fn crop(&self, id: &str) -> Option<Arc<Vec<u8>>> {
        self.inner.lock().unwrap().crops.get(id).cloned()
    }
}

#[derive(Debug, Error)]
pub enum VoteError {
    #[error("unknown trial")]
    UnknownTrial,
    #[error("trial already voted")]
    Duplicate,
    #[error("could not store vote: {0}")]
    Store(EloError),
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(serde_json::json!({ "error": msg.to_string() }))).into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    rater: Option<String>,
}

async fn next_handler(State(study): State<Arc<Study>>, Query(q): Query<NextQuery>) -> Response {
    let Some(rater) = q.rater.filter(|r| !r.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing rater");
    };
    let s = Arc::clone(&study);
    match tokio::task::spawn_blocking(move || s.next_trial(&rater)).await {
        Ok(Ok(Some(p))) => Json(p).into_response(),
        Ok(Ok(None)) => error(StatusCode::GONE, "trial budget exhausted"),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn vote_handler(State(study): State<Arc<Study>>, body: Bytes) -> Response {
    let body: VoteBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    // log appends fsync, so keep them off the async workers
    match tokio::task::spawn_blocking(move || study.vote(&body)).await {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(VoteError::UnknownTrial)) => error(StatusCode::NOT_FOUND, VoteError::UnknownTrial),
        Ok(Err(VoteError::Duplicate)) => error(StatusCode::CONFLICT, VoteError::Duplicate),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn ratings_handler(State(study): State<Arc<Study>>) -> Response {
    Json(study.ratings()).into_response()
}

async fn crop_handler(State(study): State<Arc<Study>>, UrlPath(file): UrlPath<String>) -> Response {
    let Some(id) = file.strip_suffix(".png") else {
        return error(StatusCode::NOT_FOUND, "no such crop");
    };
    match study.crop(id) {
        Some(bytes) => ([(header::CONTENT_TYPE, "image/png")], (*bytes).clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, "no such crop"),
    }
}

pub fn router(study: Arc<Study>) -> Router {
    Router::new()
        .route("/api/next", get(next_handler))
        .route("/api/vote", post(vote_handler))
        .route("/api/ratings", get(ratings_handler))
        .route("/crops/{file}", get(crop_handler))
        .with_state(study)
}

/// Serves until ctrl-c, then commits a final refit.
pub async fn serve(study: Arc<Study>, addr: SocketAddr) -> Result<(), StudyError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "study service listening");
    axum::serve(listener, router(Arc::clone(&study)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    study.settle().await
}
