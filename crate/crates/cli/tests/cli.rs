use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use splatperc::elo::{elo_fit_with, VoteLog, VoteRecord, Winner, DEFAULT_PRIOR_SCALE};
use splatperc::splat::load_splats;
use splatperc_cli::config::RunConfig;
use splatperc_cli::{apply_flags, Cli, Command as Sub};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatperc"))
        .args(args)
        .current_dir(dir)
        .env("SPLATPERC_THREADS", "1")
        .output()
        .expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(dir.path(), &["--help"])), 0);
    assert_eq!(code(&bin(dir.path(), &["--version"])), 0);
    assert_eq!(code(&bin(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&bin(dir.path(), &["fit"])), 1);
    assert_eq!(code(&bin(dir.path(), &["fit", "--target", "builtin:textured", "--loss", "nope"])), 1);
    assert_eq!(code(&bin(dir.path(), &["fit", "--target", "builtin:textured", "--gamma", "-1"])), 1);
    assert_eq!(code(&bin(dir.path(), &["erank", "--splats", "missing.spl2"])), 2);
    let o = bin(dir.path(), &["fit", "--target", "missing.png", "--iters", "5"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing.png"), "{err}");
    assert_eq!(err.matches("os error").count(), 1, "{err}");
}

#[test]
fn help_states_every_default() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["fit", "render", "eval", "erank", "rd-sweep", "encode", "decode", "study-serve", "elo-report", "selftest"] {
        let o = bin(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8(o.stdout).unwrap();
        let mut blocks: Vec<String> = Vec::new();
        for line in text.lines().skip_while(|l| !l.starts_with("Options:")).skip(1) {
            if line.trim_start().starts_with('-') {
                blocks.push(line.to_string());
            } else if let Some(b) = blocks.last_mut() {
                b.push_str(line);
            }
        }
        assert!(!blocks.is_empty(), "{sub}: no options in\n{text}");
        for b in &blocks {
            if b.trim_start().starts_with("-h") {
                continue;
            }
            assert!(b.contains("[default: ") || b.contains("[required]"), "{sub}: undocumented default in {b:?}");
        }
    }
}

#[test]
fn flags_override_file_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    fs::write(&cfg_path, r#"{"seed": 5, "train": {"iterations": 77, "init_count": 12}, "loss": {"sigma": 3.0}}"#).unwrap();
    let parse = |extra: &[&str]| {
        let mut args = vec!["splatperc", "fit", "--target", "x.png", "--config", cfg_path.to_str().unwrap()];
        args.extend_from_slice(extra);
        let Sub::Fit(f) = Cli::try_parse_from(args).unwrap().command else { unreachable!() };
        let mut cfg = RunConfig::load(f.run.config.as_deref()).unwrap();
        apply_flags(&mut cfg, &f.run).unwrap();
        cfg
    };
    let defaults = RunConfig::default();
    let file = parse(&[]);
    assert_eq!((file.seed, file.train.iterations, file.train.init_count), (5, 77, 12));
    assert_eq!(file.loss.sigma, 3.0);
    assert_eq!(file.loss.gamma, defaults.loss.gamma);
    assert_eq!(file.train.densify, defaults.train.densify);

    let flags = parse(&["--seed", "9", "--sigma", "1.5", "--max-splats", "40"]);
    assert_eq!((flags.seed, flags.train.iterations, flags.loss.sigma), (9, 77, 1.5));
    assert_eq!(flags.train.densify.max_splats, 40);
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"train": {"iteratons": 3}}"#).unwrap();
    let o = bin(dir.path(), &["fit", "--target", "builtin:textured", "--config", "bad.json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteratons"));
}

#[test]
fn fit_render_encode_decode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fit = bin(
        d,
        &["fit", "--target", "builtin:textured", "--out", "a.spl2", "--iters", "40", "--init-count", "30", "--render-out", "fit.png"],
    );
    assert_eq!(code(&fit), 0, "{}", String::from_utf8_lossy(&fit.stderr));
    for f in ["a.spl2", "a.spl2.meta.json", "a.spl2.report.json", "a.spl2.loss.csv", "fit.png"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a.spl2.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["config"]["train"]["iterations"], 40);

    assert_eq!(code(&bin(d, &["render", "--splats", "a.spl2", "--out", "again.png"])), 0);
    assert_eq!(fs::read(d.join("fit.png")).unwrap(), fs::read(d.join("again.png")).unwrap());

    assert_eq!(code(&bin(d, &["encode", "--splats", "a.spl2", "--out", "a.spq"])), 0);
    assert_eq!(code(&bin(d, &["decode", "--input", "a.spq", "--out", "b.spl2"])), 0);
    let (a, b) = (load_splats(d.join("a.spl2")).unwrap(), load_splats(d.join("b.spl2")).unwrap());
    assert_eq!(a.len(), b.len());
    for (i, y) in a.depth_order().into_iter().zip(b.iter()) {
        let x = &a.splats[i];
        assert!((x.mean[0] - y.mean[0]).abs() <= 1.0 / 32.0 + 1e-9);
    }

    let o = bin(d, &["eval", "--target", "builtin:textured", "--splats", "a.spl2", "b.spl2", "--json", "e.json"]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    assert_eq!(code(&bin(d, &["erank", "--splats", "a.spl2", "--out", "hist"])), 0);
    assert!(d.join("hist.erank.dat").exists() && d.join("hist.erank.json").exists());
}

#[test]
fn render_without_meta_needs_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&bin(d, &["fit", "--target", "builtin:textured", "--out", "a.spl2", "--iters", "5", "--init-count", "5"])), 0);
    fs::remove_file(d.join("a.spl2.meta.json")).unwrap();
    assert_eq!(code(&bin(d, &["render", "--splats", "a.spl2", "--out", "x.png"])), 1);
    assert_eq!(code(&bin(d, &["render", "--splats", "a.spl2", "--out", "x.png", "--width", "10", "--height", "8"])), 0);
}

#[test]
fn elo_report_matches_library_fit() {
    let dir = tempfile::tempdir().unwrap();
    let methods: Vec<String> = ["ours", "baseline", "other"].map(String::from).to_vec();
    let log_path = dir.path().join("votes.jsonl");
    let (mut log, _) = VoteLog::open(&log_path, &methods).unwrap();
    let mut votes = Vec::new();
    for t in 0..60u64 {
        let (a, b) = ((t % 3) as usize, ((t + 1) % 3) as usize);
        let v = VoteRecord {
            trial_id: format!("t{t}"),
            method_a: methods[a].clone(),
            method_b: methods[b].clone(),
            crop_id: format!("c{}", t % 7),
            winner: if (t * 7) % 5 < 3 { Winner::A } else { Winner::B },
            rater_id: format!("r{}", t % 4),
            unix_time: 1_700_000_000 + t,
        };
        log.append(&v).unwrap();
        votes.push(v);
    }
    drop(log);
    let o = bin(dir.path(), &["elo-report", "--votes", "votes.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let direct = elo_fit_with(&methods, &votes, DEFAULT_PRIOR_SCALE).unwrap();
    let expect = serde_json::to_string_pretty(&direct).unwrap() + "\n";
    assert_eq!(String::from_utf8(o.stdout).unwrap(), expect);
}
