use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn protoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoseg")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = protoseg(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&["gen", "--out", s(&dir), "--classes", "16", "--per-class", "6", "--size", "32", "--seed", "3"]);
    dir
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_writes_800_samples_with_a_stable_manifest() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["gen", "--out", s(d), "--classes", "16", "--per-class", "50", "--size", "64", "--seed", "7"]);
    }
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["samples"].as_array().unwrap().len(), 800);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 800);
    assert_eq!(fs::read_dir(a.join("labels")).unwrap().count(), 800);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let ra = read_json(&a.join("run.json"));
    let rb = read_json(&b.join("run.json"));
    assert_eq!(ra["settings"]["manifest_sha256"], rb["settings"]["manifest_sha256"]);
    assert_eq!(ra["artifacts"].as_array().unwrap().len(), 1601);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&protoseg(&["gen", "--out", s(&out), "--size", "63"])), 2);
    assert_eq!(code(&protoseg(&["gen", "--out", s(&out), "--bogus"])), 2);
    assert_eq!(code(&protoseg(&["frobnicate"])), 2);

    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep"), "x").unwrap();
    let args = ["gen", "--out", s(&out), "--per-class", "2", "--size", "32"];
    assert_eq!(code(&protoseg(&args)), 2);
    assert!(out.join("keep").exists());
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[gen]\nimage_sise = 32\n").unwrap();
    assert_eq!(code(&protoseg(&["--config", s(&cfg), "gen", "--out", s(&tmp.path().join("y"))])), 2);
}

#[test]
fn runtime_failures_exit_3() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope");
    let out = protoseg(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 3);
    let garbage = tmp.path().join("g.ckpt");
    fs::write(&garbage, "not a checkpoint").unwrap();
    let out = protoseg(&["eval", "--checkpoint", s(&garbage), "--data", s(&missing), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn help_lists_every_flag() {
    let help = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    for flag in [
        "--data", "--out", "--force", "--split", "--episodes", "--lr0", "--momentum", "--weight-decay", "--poly-power", "--batch-size", "--lambda-mcl",
        "--seed", "--no-mcl", "--no-pff", "--no-spt", "--freeze-encoder", "--sum-loss", "--no-flip", "--config",
    ] {
        assert!(help.contains(flag), "missing {flag}");
    }
    let help = String::from_utf8(ok(&["eval", "--help"]).stdout).unwrap();
    for flag in ["--checkpoint", "--prototype", "--annotation", "--shots", "--include-pseudo", "--runs", "--save-masks", "--per-episode"] {
        assert!(help.contains(flag), "missing {flag}");
    }
}

#[test]
fn train_then_eval() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "[train]\nepisodes = 100\nvalidate_every = 100\nvalidation_episodes = 5\n").unwrap();

    let t0 = tmp.path().join("t0");
    let t1 = tmp.path().join("t1");
    let c = s(&cfg);
    ok(&["--config", c, "train", "--data", s(&data), "--out", s(&t0), "--episodes", "250", "--seed", "0"]);
    ok(&["--config", c, "train", "--data", s(&data), "--out", s(&t1), "--episodes", "250", "--seed", "1", "--no-pff", "--no-mcl", "--no-spt"]);

    // flag beats file, file beats default
    let rows = csv_rows(&t0.join("loss.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["100", "200", "250"]);
    let run = read_json(&t0.join("run.json"));
    assert_eq!(run["settings"]["train"]["episodes"], 250);
    assert_eq!(run["settings"]["train"]["validation_episodes"], 5);
    for a in run["artifacts"].as_array().unwrap() {
        assert!(t0.join(a.as_str().unwrap()).exists());
    }
    assert_ne!(fs::read(t0.join("loss.csv")).unwrap(), fs::read(t1.join("loss.csv")).unwrap());
    let base = read_json(&t1.join("run.json"));
    assert_eq!(base["settings"]["train"]["flags"]["use_pff"], false);

    let ck = t0.join("model.ckpt");
    let eval = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out), "--runs", "2", "--episodes", "10"];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let sup = eval("sup", &["--prototype", "support"]);
    let fused = eval("fused", &["--prototype", "fused", "--save-masks"]);
    let again = eval("again", &["--prototype", "fused"]);
    eval("scribble", &["--annotation", "scribble"]);
    let kshot = eval("k3", &["--shots", "3", "--include-pseudo"]);

    assert_eq!(fs::read(fused.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
    let header = fs::read_to_string(sup.join("metrics.csv")).unwrap();
    assert!(header.starts_with("split,class,tp,fp,fn,iou,mean_iou,binary_iou,runs,seed\n"));
    assert_eq!(csv_rows(&sup.join("metrics.csv")).len(), 4);
    assert_eq!(fs::read_to_string(fused.join("episodes.jsonl")).unwrap().lines().count(), 20);
    assert_eq!(fs::read_dir(fused.join("masks")).unwrap().count(), 20);
    let summary = read_json(&kshot.join("summary.json"));
    assert_eq!(summary["config"]["shots"], 3);
    assert_eq!(summary["per_run_mean_iou"].as_array().unwrap().len(), 2);
    let run = read_json(&fused.join("run.json"));
    assert_eq!(run["checkpoint"].as_str().unwrap(), s(&ck));
    for a in run["artifacts"].as_array().unwrap() {
        assert!(fused.join(a.as_str().unwrap()).exists());
    }
}

#[test]
fn sweeps_emit_sorted_rows() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let common = ["--episodes", "2", "--eval-episodes", "2", "--validate-every", "0"];

    let lam = tmp.path().join("lam");
    let mut args = vec!["sweep", "--grid", "lambda", "--data", s(&data), "--out", s(&lam)];
    args.extend_from_slice(&common);
    ok(&args);
    let rows = csv_rows(&lam.join("sweep.csv"));
    assert_eq!(rows.len(), 11);
    let vals: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(vals[0], 0.01);
    assert_eq!(vals[10], 1.0);

    let grid = tmp.path().join("grid");
    let mut args = vec!["sweep", "--grid", "lr-batch", "--data", s(&data), "--out", s(&grid), "--lrs", "0.004,0.001,0.002", "--batches", "4,1,2"];
    args.extend_from_slice(&common);
    ok(&args);
    let rows = csv_rows(&grid.join("sweep.csv"));
    assert_eq!(rows.len(), 9);
    let keys: Vec<(f64, usize)> = rows.iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap())).collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
}
