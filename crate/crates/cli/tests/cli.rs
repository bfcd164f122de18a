use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn memtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memtrack")).args(args).output().expect("spawn memtrack")
}

fn ok(args: &[&str]) -> Output {
    let out = memtrack(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", d.to_str().unwrap(), "--num", "4", "--seed", "1", "--set", "synth.frames=5"]);
    }
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.len(), 4 * 7);
    assert!(ta.iter().any(|(n, _)| n.starts_with("synth_00000001")));
    assert_eq!(ta, tb);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "7", "--tol", "1e-4", "--seeds", "2"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

#[test]
fn gradcheck_fails_at_impossible_tolerance() {
    assert!(!memtrack(&["gradcheck", "--seed", "7", "--tol", "1e-14", "--seeds", "1"]).status.success());
}

#[test]
fn bad_input_is_reported() {
    let out = memtrack(&["eval", "--results", "/nonexistent/r.txt", "--gt", "/nonexistent/gt.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!memtrack(&["track", "--ckpt", "x", "--seq", "y", "--ablation", "bogus"]).status.success());
}

#[test]
fn train_track_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    ok(&["synth", "--out", &p("data"), "--num", "1", "--seed", "3", "--set", "synth.frames=40", "--set", "synth.drift=0.05"]);
    let seq = p("data/synth_00000003");
    ok(&["train", "--out", &p("m.ckpt"), "--steps", "30", "--seed", "2", "--set", "train.clip_len=4"]);
    assert!(dir.path().join("m.ckpt.cfg").is_file());
    ok(&["track", "--ckpt", &p("m.ckpt"), "--seq", &seq, "--out", &p("full.txt")]);
    ok(&["track", "--ckpt", &p("m.ckpt"), "--seq", &seq, "--out", &p("frozen.txt"), "--ablation", "frozen"]);
    let (full, frozen) = (fs::read_to_string(p("full.txt")).unwrap(), fs::read_to_string(p("frozen.txt")).unwrap());
    assert_eq!(full.lines().count(), 40);
    assert!(full.lines().all(|l| l.split(',').count() == 4));
    assert_ne!(full, frozen);
    ok(&["eval", "--results", &p("full.txt"), "--gt", &seq, "--out", &p("m.json"), "--curves", &p("c.csv")]);
    let json = fs::read_to_string(p("m.json")).unwrap();
    for key in ["per_frame", "precision_curve", "success_curve", "auc", "fps"] {
        assert!(json.contains(&format!("\"{key}\"")), "{key} missing");
    }
    ok(&["track", "--ckpt", &p("m.ckpt"), "--seq", &seq, "--out", &p("small.txt"), "--npos", "2", "--nneg", "3"]);
}
