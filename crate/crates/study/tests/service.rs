use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatperc::elo::{elo_fit_registered, read_vote_log, ELO_PER_THETA};
use splatperc::image_io::{decode_image, save_image, ImageBuffer};
use splatperc_study::*;
use tower::ServiceExt;

/// Method `k` renders a flat image with red = level(k); views differ in blue.
fn level(k: usize) -> f64 {
    0.1 + 0.2 * k as f64
}

fn setup(dir: &Path, methods: usize, budget: Option<usize>) -> StudyConfig {
    let views = ["v0.png", "v1.png"];
    let reference = dir.join("ref");
    std::fs::create_dir_all(&reference).unwrap();
    for (vi, v) in views.iter().enumerate() {
        let img = ImageBuffer::from_fn(16, 12, 3, |x, _, c| [0.5, x as f64 / 16.0, 0.3 * vi as f64][c]);
        save_image(&img, reference.join(v)).unwrap();
    }
    let sources: Vec<MethodSource> = (0..methods)
        .map(|k| {
            let d = dir.join(format!("method{k}"));
            std::fs::create_dir_all(&d).unwrap();
            for (vi, v) in views.iter().enumerate() {
                let img = ImageBuffer::from_fn(16, 12, 3, |_, _, c| [level(k), 0.5, 0.3 * vi as f64][c]);
                save_image(&img, d.join(v)).unwrap();
            }
            MethodSource {
                name: format!("secret-method-{k}"),
                dir: d,
            }
        })
        .collect();
    serde_json::from_value(serde_json::json!({
        "methods": sources,
        "reference_dir": reference,
        "vote_log": dir.join("votes.jsonl"),
        "crop_side": 8,
        "trial_budget": budget,
        "seed": 5,
    }))
    .unwrap()
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_vote(app: &Router, body: String) -> StatusCode {
    let req = Request::post("/api/vote")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    call(app, req).await.0
}

async fn next(app: &Router, rater: &str) -> TrialPayload {
    let (status, body) = get(app, &format!("/api/next?rater={rater}")).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    assert!(!text.contains("secret-method"), "identity leaked: {text}");
    assert!(!text.contains("method"), "identity leaked: {text}");
    serde_json::from_str(&text).unwrap()
}

async fn ratings(app: &Router) -> RatingsResponse {
    let (status, body) = get(app, "/api/ratings").await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

fn vote_json(trial: &str, choice: &str) -> String {
    format!(r#"{{"trial_id":"{trial}","choice":"{choice}"}}"#)
}

#[tokio::test]
async fn next_vote_ratings_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let study = Study::open(setup(dir.path(), 2, None)).unwrap();
    let app = router(Arc::clone(&study));
    let before = ratings(&app).await.votes_recorded;
    let t = next(&app, "r1").await;
    for url in [&t.reference, &t.image_a, &t.image_b] {
        let (status, png) = get(&app, url).await;
        assert_eq!(status, StatusCode::OK);
        let img = decode_image(&png).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
    }
    assert_eq!(post_vote(&app, vote_json(&t.trial_id, "a")).await, StatusCode::NO_CONTENT);
    assert_eq!(ratings(&app).await.votes_recorded, before + 1);
    // crops are dropped once voted
    assert_eq!(get(&app, &t.image_a).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn replayed_vote_conflicts_and_store_is_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, None);
    let log = cfg.vote_log.clone();
    let app = router(Study::open(cfg).unwrap());
    let t = next(&app, "r1").await;
    assert_eq!(post_vote(&app, vote_json(&t.trial_id, "b")).await, StatusCode::NO_CONTENT);
    let stored = std::fs::read(&log).unwrap();
    assert_eq!(post_vote(&app, vote_json(&t.trial_id, "b")).await, StatusCode::CONFLICT);
    assert_eq!(post_vote(&app, vote_json(&t.trial_id, "a")).await, StatusCode::CONFLICT);
    assert_eq!(std::fs::read(&log).unwrap(), stored);
    assert_eq!(ratings(&app).await.votes_recorded, 1);
}

#[tokio::test]
async fn bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Study::open(setup(dir.path(), 3, None)).unwrap());
    assert_eq!(post_vote(&app, vote_json("deadbeef", "a")).await, StatusCode::NOT_FOUND);
    let t = next(&app, "r").await;
    let bodies = ["{".to_string(), "{}".into(), vote_json(&t.trial_id, "c"), r#"{"trial_id":3,"choice":"a"}"#.into()];
    for body in bodies {
        assert_eq!(post_vote(&app, body.clone()).await, StatusCode::BAD_REQUEST, "{body}");
    }
    assert_eq!(get(&app, "/api/next").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/crops/nothing.png").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/crops/nothing.jpg").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn budget_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Study::open(setup(dir.path(), 2, Some(2))).unwrap());
    next(&app, "r").await;
    next(&app, "r").await;
    assert_eq!(get(&app, "/api/next?rater=r").await.0, StatusCode::GONE);
}

#[tokio::test]
async fn same_crop_for_both_sides_and_sides_are_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let study = Study::open(setup(dir.path(), 2, None)).unwrap();
    let app = router(Arc::clone(&study));
    let mut first_is_0 = 0;
    let n = 200;
    for _ in 0..n {
        let t = next(&app, "r").await;
        let a = decode_image(&get(&app, &t.image_a).await.1).unwrap();
        let b = decode_image(&get(&app, &t.image_b).await.1).unwrap();
        // identical crops apart from the method's red level
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(a.get(x, y, 2), b.get(x, y, 2));
            }
        }
        if (a.get(0, 0, 0) - level(0)).abs() < 0.01 {
            first_is_0 += 1;
        }
        post_vote(&app, vote_json(&t.trial_id, "a")).await;
    }
    // fair coin: sd = 7.1
    assert!((first_is_0 as i64 - n / 2).abs() < 30, "{first_is_0}");
    study.settle().await.unwrap();
    let votes = study.votes();
    let a0 = votes.iter().filter(|v| v.method_a == "secret-method-0").count();
    assert_eq!(a0, first_is_0 as usize);
}

#[tokio::test]
async fn restart_recovers_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 3, None);
    let study = Study::open(cfg.clone()).unwrap();
    let app = router(Arc::clone(&study));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..60 {
        let t = next(&app, &format!("r{k}")).await;
        let c = if rng.random_bool(0.5) { "a" } else { "b" };
        assert_eq!(post_vote(&app, vote_json(&t.trial_id, c)).await, StatusCode::NO_CONTENT);
    }
    study.settle().await.unwrap();
    let live = study.ratings();
    drop(app);
    drop(study);
    let reopened = Study::open(cfg.clone()).unwrap();
    let back = reopened.ratings();
    assert_eq!(back.votes_recorded, 60);
    assert_eq!(back.table, live.table);
    let (header, votes) = read_vote_log(&cfg.vote_log).unwrap();
    assert_eq!(elo_fit_registered(&header.methods, &votes, 2.0).unwrap(), live.table);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn simulated_raters_recover_skills() {
    let dir = tempfile::tempdir().unwrap();
    let truth = [1000.0, 1120.0, 900.0, 1050.0];
    let study = Study::open(setup(dir.path(), truth.len(), None)).unwrap();
    let app = router(Arc::clone(&study));
    let identify = |png: &[u8]| {
        let r = decode_image(png).unwrap().get(0, 0, 0);
        (0..truth.len()).min_by(|&a, &b| (level(a) - r).abs().total_cmp(&(level(b) - r).abs())).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for rater in 0..500 {
        for _ in 0..4 {
            let t = next(&app, &format!("rater{rater}")).await;
            let a = identify(&get(&app, &t.image_a).await.1);
            let b = identify(&get(&app, &t.image_b).await.1);
            assert_ne!(a, b);
            let p = 1.0 / (1.0 + ((truth[b] - truth[a]) / ELO_PER_THETA).exp());
            let c = if rng.random::<f64>() < p { "a" } else { "b" };
            assert_eq!(post_vote(&app, vote_json(&t.trial_id, c)).await, StatusCode::NO_CONTENT);
        }
    }
    study.settle().await.unwrap();
    let r = ratings(&app).await;
    assert_eq!(r.votes_recorded, 2000);
    assert_eq!(r.table.votes, 2000);
    for (k, row) in r.table.methods.iter().enumerate() {
        assert!((row.elo - truth[k]).abs() < 40.0, "{}: {} vs {}", row.method, row.elo, truth[k]);
    }
}

#[test]
fn config_rejects_unknown_fields_and_small_studies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::to_value(setup(dir.path(), 2, None)).unwrap();
    cfg["bogus"] = 1.into();
    assert!(serde_json::from_value::<StudyConfig>(cfg).is_err());
    let mut one = setup(dir.path(), 1, None);
    one.vote_log = dir.path().join("other.jsonl");
    assert!(matches!(Study::open(one), Err(StudyError::Config(_))));
}
