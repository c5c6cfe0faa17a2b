use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn fprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stage(cfg: &Path, out: &Path, cmd: &str) {
    let o = fprune(&[cmd, "--config", s(cfg), "--out", s(out), "--threads", "1"]);
    assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn report_on_empty_directory_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = fprune(&["report", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    for name in ["config.toml", "trajectory.csv", "layer_filters.csv", "summary.csv"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn missing_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fprune(&["train", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = fs::read_to_string(smoke_config()).unwrap().replace("seed = 1", "seed = 1\ncolour = 3");
    fs::write(&cfg, text).unwrap();
    assert_eq!(code(&fprune(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())])), 2);
    let mismatched = fs::read_to_string(smoke_config()).unwrap().replace("class_count = 4", "class_count = 5");
    fs::write(&cfg, mismatched).unwrap();
    assert_eq!(code(&fprune(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())])), 2);
    let o = fprune(&["gen-data", "--config", s(&smoke_config()), "--out", s(dir.path()), "--threads", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn training_before_data_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fprune(&["train", "--config", s(&smoke_config()), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn seed_override_is_caught_as_a_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    stage(&smoke_config(), dir.path(), "gen-data");
    let o = fprune(&["train", "--config", s(&smoke_config()), "--out", s(dir.path()), "--seed", "2"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    stage(&cfg, dir.path(), "gen-data");
    stage(&cfg, dir.path(), "train");
    let model = dir.path().join("model/trained.fpm");
    let mut bytes = fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = dir.path().join("bad.fpm");
    fs::write(&bad, bytes).unwrap();
    let o = fprune(&["eval", "--config", s(&cfg), "--out", s(dir.path()), "--checkpoint", s(&bad)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn stepwise_run_matches_one_shot_run_and_tags_every_file() {
    let cfg = smoke_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    stage(&cfg, a.path(), "run");
    assert!(start.elapsed() < Duration::from_secs(300));
    for cmd in ["gen-data", "train", "prune", "retrain", "eval", "explain", "report"] {
        stage(&cfg, b.path(), cmd);
    }
    let fa = files(a.path());
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> { v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect() };
    assert_eq!(rel(a.path(), &fa), rel(b.path(), &files(b.path())));
    let config_bytes = fs::read(a.path().join("config.toml")).unwrap();
    let want = hex::encode(Sha256::digest(&config_bytes));
    let mut tagged = 0;
    for p in &fa {
        let bytes = fs::read(p).unwrap();
        let other = fs::read(b.path().join(p.strip_prefix(a.path()).unwrap())).unwrap();
        assert_eq!(bytes, other, "{} differs between runs", p.display());
        match p.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                let first = String::from_utf8(bytes).unwrap().lines().next().unwrap().to_string();
                assert_eq!(first, format!("# config_hash={want}"), "{}", p.display());
                tagged += 1;
            }
            Some("pgm") => {
                let text = String::from_utf8_lossy(&bytes[..bytes.len().min(120)]).to_string();
                assert!(text.starts_with(&format!("P5\n# config_hash={want}\n")), "{}", p.display());
                tagged += 1;
            }
            Some("fpm") | Some("fpds") => {
                let needle = want.as_bytes();
                assert!(bytes.windows(needle.len()).any(|w| w == needle), "{}", p.display());
                tagged += 1;
            }
            Some("svg") | Some("toml") => {}
            other => panic!("unexpected artifact {other:?}"),
        }
    }
    assert!(tagged > 40);
}

#[test]
fn rerunning_eval_gives_identical_scores() {
    let cfg = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "train"] {
        stage(&cfg, dir.path(), cmd);
    }
    let model = dir.path().join("model/trained.fpm");
    let run_eval = || {
        let o = fprune(&["eval", "--config", s(&cfg), "--out", s(dir.path()), "--checkpoint", s(&model)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join("eval/custom/trained_t1.csv")).unwrap()
    };
    let first = run_eval();
    assert!(first.len() > 100);
    assert_eq!(first, run_eval());
}

#[test]
fn explain_compares_two_checkpoints() {
    let cfg = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "train", "prune"] {
        stage(&cfg, dir.path(), cmd);
    }
    let a = dir.path().join("model/trained.fpm");
    let b = dir.path().join("prune/checkpoints/iter_0010.fpm");
    let o = fprune(&[
        "explain", "--config", s(&cfg), "--out", s(dir.path()), "--checkpoint", s(&a), "--checkpoint", s(&b),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let psnr = fs::read_to_string(dir.path().join("explain/custom_psnr.csv")).unwrap();
    assert_eq!(psnr.lines().count(), 2 + 4);
    let o = fprune(&["explain", "--config", s(&cfg), "--out", s(dir.path()), "--checkpoint", s(&a), "--checkpoint", s(&a)]);
    assert_eq!(code(&o), 0);
    let same = fs::read_to_string(dir.path().join("explain/custom_psnr.csv")).unwrap();
    assert!(same.lines().skip(2).all(|l| l.ends_with(",100") || l.ends_with(",100.000000000")), "{same}");
}
