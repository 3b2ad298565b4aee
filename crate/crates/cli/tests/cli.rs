use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dablog(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dablog")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = dablog(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn status(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn one_line(out: &Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err:?}");
    err
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dablog(dir.path(), &["--help"]);
    assert_eq!(status(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["gen", "build-keys", "train", "detect", "eval", "sweep", "merge"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_errors_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["frobnicate"][..],
        &["gen", "--normal", "3", "--bogus", "-o", "x"],
        &["train", "lstm", "--in", "x", "-o", "m"],
        &["detect", "--model", "missing.model", "--in", "missing", "-o", "v"],
        &["gen", "--normal", "3", "--abnormal", "1", "--train", "-o", "t"],
    ] {
        let out = dablog(d, args);
        assert_eq!(status(&out), 1, "{args:?}");
        one_line(&out);
    }
}

#[test]
fn config_violations_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "2", "--normal", "20", "-o", "c"]);
    for (name, text) in [
        ("unknown.toml", "version = 1\nlearning_rate = 3\n"),
        ("version.toml", "version = 7\n"),
        ("seqlen.toml", "version = 1\nseqlen = 1\n"),
    ] {
        fs::write(d.join(name), text).unwrap();
        let out = dablog(d, &["train", "freq", "--config", name, "--in", "c", "-o", "m"]);
        assert_eq!(status(&out), 1, "{name}");
        assert!(one_line(&out).starts_with("error:"));
        assert!(!d.join("m").exists());
    }
    let out = dablog(d, &["sweep", "--model", "m", "--in", "c", "--grid", "0:5:1", "-o", "s.csv"]);
    assert_eq!(status(&out), 1);
}

#[test]
fn gen_is_deterministic_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "9", "--normal", "40", "--abnormal", "4", "-o", "a"]);
    ok(d, &["gen", "--seed", "9", "--normal", "40", "--abnormal", "4", "-o", "b"]);
    ok(d, &["gen", "--seed", "9", "--normal", "40", "--train", "-o", "t"]);
    for f in ["records.jsonl", "labels.jsonl", "sessions.jsonl"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(d.join("a/records.jsonl")).unwrap(), fs::read(d.join("t/records.jsonl")).unwrap());
    let labels = fs::read_to_string(d.join("a/labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 44);
    assert_eq!(labels.matches("abnormal").count(), 4);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 3);
}

#[test]
fn pipeline_with_frequency_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "4", "--normal", "60", "--abnormal", "6", "-o", "test"]);
    ok(d, &["gen", "--seed", "4", "--normal", "80", "--train", "-o", "train"]);
    ok(d, &["build-keys", "--in", "train/records.jsonl", "--granularity", "K1", "-o", "keys.json"]);
    ok(d, &["train", "freq", "--in", "train", "--keys", "keys.json", "-o", "f.model"]);
    let before = fs::read(d.join("f.model")).unwrap();
    ok(d, &["detect", "--model", "f.model", "--in", "test", "--theta-n", "50", "-o", "v.jsonl"]);
    ok(d, &["detect", "--model", "f.model", "--in", "test", "--theta-p", "0.5", "-o", "vp.jsonl"]);
    assert_eq!(fs::read(d.join("f.model")).unwrap(), before, "detect touched the model");
    ok(d, &["eval", "--verdicts", "v.jsonl", "--labels", "test/labels.jsonl", "-o", "report.txt"]);
    ok(d, &["eval", "--verdicts", "v.jsonl", "--labels", "test/labels.jsonl", "--format", "json", "-o", "report.json"]);
    ok(d, &["sweep", "--model", "f.model", "--in", "test", "--grid", "10,50,100", "-o", "s.csv"]);
    ok(d, &["merge", "--a", "v.jsonl", "--b", "vp.jsonl", "--mode", "union", "-o", "u.jsonl"]);

    assert_eq!(fs::read_to_string(d.join("v.jsonl")).unwrap().lines().count(), 66);
    let report = fs::read_to_string(d.join("report.txt")).unwrap();
    for row in ["TP", "FP", "TN", "FN", "FP Rate", "Recall", "Precision", "F1 Score", "Accuracy"] {
        assert!(report.lines().any(|l| l.starts_with(row)), "{row} missing");
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    let c = &json["counts"];
    let total: u64 = ["tp", "fp", "tn", "fn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 66);
    let csv = fs::read_to_string(d.join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "theta_n,n,tp,fp,tn,fn,f1");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("100,") && lines[3].contains(",0,0,"));
    for out in ["keys.json", "f.model", "v.jsonl", "report.txt", "s.csv", "u.jsonl"] {
        assert!(d.join(format!("{out}.manifest.json")).is_file(), "{out} has no manifest");
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("v.jsonl.manifest.json")).unwrap()).unwrap();
    assert!(m["config_hash"].is_string());
    assert!(m["inputs"].as_object().unwrap().contains_key("f.model"));
}

#[test]
fn eval_rejects_mismatched_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "1", "--normal", "10", "-o", "a"]);
    ok(d, &["gen", "--seed", "2", "--normal", "10", "-o", "b"]);
    ok(d, &["train", "freq", "--in", "a", "-o", "f.model"]);
    ok(d, &["detect", "--model", "f.model", "--in", "a", "-o", "v.jsonl"]);
    let out = dablog(d, &["eval", "--verdicts", "v.jsonl", "--labels", "b/labels.jsonl", "-o", "r.txt"]);
    assert_eq!(status(&out), 1);
    one_line(&out);
}
