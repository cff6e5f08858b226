use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn l2c(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2c"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = l2c(args);
    assert!(
        out.status.success(),
        "l2c {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--n-pairs",
        "20",
        "--n-singles",
        "10",
        "--out",
        s(dir),
    ]);
}

const TINY: [&str; 10] = [
    "--set",
    "max_iters=4",
    "--set",
    "eval_every=2",
    "--set",
    "d=8",
    "--set",
    "hidden=16",
    "--set",
    "k=2",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    serde_json::from_str(&ok(&args)).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_seeded_and_validates_fractions() {
    let t = tempfile::tempdir().unwrap();
    gen(&t.path().join("a"));
    gen(&t.path().join("b"));
    for f in [
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "singles_train.jsonl",
        "vocab.txt",
    ] {
        assert_eq!(
            fs::read(t.path().join("a").join(f)).unwrap(),
            fs::read(t.path().join("b").join(f)).unwrap()
        );
    }
    let (ma, mb) = (manifest(&t.path().join("a")), manifest(&t.path().join("b")));
    assert_eq!(ma["command"], "gen-data");
    assert_eq!(ma["seed"], 3);
    assert_eq!(ma["config"], mb["config"]);

    let bad = l2c(&[
        "gen-data",
        "--fractions",
        "0.5,0.6,0.1",
        "--out",
        s(&t.path().join("c")),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
    assert!(!t.path().join("c").join("train.jsonl").exists());
}

#[test]
fn train_eval_caption_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let (data, run) = (t.path().join("data"), t.path().join("run"));
    gen(&data);
    let summary = train(&data, &run, &[]);
    assert!(summary.is_object());
    for p in ["best", "last", "history.csv", "config.txt", "run_manifest.json"] {
        assert!(run.join(p).exists(), "{p} missing");
    }
    let m = manifest(&run);
    assert_eq!(m["command"], "train");
    assert_eq!(m["inputs_sha256"].as_str().unwrap().len(), 64);

    let ckpt = run.join("best");
    let report: Value = serde_json::from_str(&ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "test",
    ]))
    .unwrap();
    for key in ["bleu4", "rouge_l", "cider_d"] {
        let v = report[key]
            .as_f64()
            .unwrap_or_else(|| panic!("{key} missing from {report}"));
        assert!(v.is_finite() && v >= 0.0);
    }

    let rec: Value = serde_json::from_str(
        fs::read_to_string(data.join("test.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let (a, b) = (rec["a"].to_string(), rec["b"].to_string());
    let spec_file = t.path().join("b.json");
    fs::write(&spec_file, &b).unwrap();
    let c1 = ok(&["caption", "--ckpt", s(&ckpt), "--pair-spec-a", &a, "--pair-spec-b", &b]);
    let c2 = ok(&[
        "caption",
        "--ckpt",
        s(&ckpt),
        "--pair-spec-a",
        &a,
        "--pair-spec-b",
        s(&spec_file),
    ]);
    assert_eq!(c1, c2);
    assert!(c1.ends_with('\n'));

    let bad = l2c(&[
        "caption",
        "--ckpt",
        s(&ckpt),
        "--pair-spec-a",
        "{\"size\":1}",
        "--pair-spec-b",
        &b,
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let missing = l2c(&["eval", "--ckpt", s(&t.path().join("nope")), "--data", s(&data)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn ablation_flags_reach_config_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let (data, run) = (t.path().join("data"), t.path().join("run"));
    gen(&data);
    train(&data, &run, &["--no-gcn", "--no-tv"]);
    let cfg = &manifest(&run)["config"];
    assert_eq!(cfg["no_gcn"], true);
    assert_eq!(cfg["no_tv"], true);
    assert_eq!(cfg["no_semantic_pool"], false);
    let text = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(text.lines().any(|l| l.replace(' ', "") == "no_gcn=true"), "{text}");
}

#[test]
fn bad_overrides_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data);
    for set in ["bogus=1", "lr=abc", "k=0"] {
        let out = l2c(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&t.path().join("r")),
            "--set",
            set,
        ]);
        assert_eq!(out.status.code(), Some(1), "--set {set}");
    }
}

#[test]
fn gradcheck_passes_and_reports_a_table() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--trials", "1", "--out", s(t.path())]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("check\tmax_rel_error\tchecked\tresult"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 40);
    assert!(rows.iter().all(|r| r.ends_with("\tpass")));
    assert_eq!(manifest(t.path())["command"], "gradcheck");
}
