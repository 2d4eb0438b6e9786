use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zsre(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zsre"));
    cmd.current_dir(dir).args(args);
    for (key, _) in std::env::vars() {
        if key.starts_with("ZSRE_") {
            cmd.env_remove(key);
        }
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.insert(p.display().to_string());
        }
    }
    out
}

fn synth(dir: &Path) {
    let out = zsre(dir, &["synth", "--out", "synth"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["dataset.json", "labels.txt", "sideinfo.jsonl", "config.json"] {
        assert!(dir.join("synth").join(name).is_file(), "{name}");
    }
}

#[test]
fn synth_then_full_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = zsre(dir.path(), &["--config", "synth/config.json", "--seed", "3", "run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("sideinfo: 0 generated"), "{text}");
    assert!(text.contains("Sentence Gap"), "{text}");
    let run = dir.path().join("synth/run");
    for name in ["report.json", "report.txt", "predictions.jsonl", "breakdowns.jsonl", "manifest.json"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["completed"], true);
    assert_eq!(manifest["config"]["seed"], 3);

    // Same seed, same report.
    let before = fs::read(run.join("report.json")).unwrap();
    let again = zsre(dir.path(), &["--config", "synth/config.json", "--seed", "3", "run", "--stages", "eval"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(fs::read(run.join("report.json")).unwrap(), before);
}

#[test]
fn gap_and_explain_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = zsre(dir.path(), &["--config", "synth/config.json", "eval", "run", "--sizes", "5", "--samples", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let predictions = dir.path().join("synth/run/predictions.jsonl");
    let lines = fs::read_to_string(&predictions).unwrap().lines().count();
    let gap = zsre(dir.path(), &["gap", "--predictions", predictions.to_str().unwrap(), "--json"]);
    assert!(gap.status.success(), "{}", stderr(&gap));
    let table: serde_json::Value = serde_json::from_str(&stdout(&gap)).unwrap();
    let total: u64 = table["rows"].as_array().unwrap().iter().map(|r| r["total"].as_u64().unwrap()).sum();
    assert_eq!(total as usize, lines);
    let filtered = zsre(dir.path(), &["gap", "--predictions", predictions.to_str().unwrap(), "--size", "99"]);
    assert!(stdout(&filtered).lines().nth(1).unwrap().contains(" 0 "));

    let explain = zsre(
        dir.path(),
        &["--config", "synth/config.json", "explain", "--doc", "synth-00", "--head", "0", "--tail", "1", "--json"],
    );
    assert!(explain.status.success(), "{}", stderr(&explain));
    let value: serde_json::Value = serde_json::from_str(&stdout(&explain)).unwrap();
    let rows = value["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 16);
    assert_eq!(rows.iter().filter(|r| r["winner"] == true).count(), 1);

    let single = zsre(
        dir.path(),
        &["--config", "synth/config.json", "explain", "--doc", "synth-00", "--head", "0", "--tail", "1", "--label", "spouse"],
    );
    assert!(single.status.success(), "{}", stderr(&single));
    assert!(stdout(&single).contains("spouse"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let before = files(dir.path());
    let out = zsre(dir.path(), &["--config", "synth/config.json", "--dry-run", "run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!stdout(&out).is_empty());
    assert_eq!(files(dir.path()), before);

    let synth_dry = zsre(dir.path(), &["--dry-run", "synth", "--out", "elsewhere"]);
    assert!(synth_dry.status.success());
    assert!(!dir.path().join("elsewhere").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());

    let validate = zsre(dir.path(), &["corpus", "validate", "--dataset", "synth/dataset.json"]);
    assert_eq!(validate.status.code(), Some(0), "{}", stderr(&validate));
    let report: serde_json::Value = serde_json::from_str(&stdout(&validate)).unwrap();
    assert_eq!(report["valid"], true);

    // Configuration problems: 2.
    let missing = zsre(dir.path(), &["corpus", "validate", "--dataset", "nope.json"]);
    assert_eq!(missing.status.code(), Some(2), "{}", stderr(&missing));
    let bad_weights = zsre(dir.path(), &["--config", "synth/config.json", "run", "--weights", "[1, 2]"]);
    assert_eq!(bad_weights.status.code(), Some(2), "{}", stderr(&bad_weights));
    fs::write(dir.path().join("bad.json"), r#"{"not_a_field": 1}"#).unwrap();
    let bad_config = zsre(dir.path(), &["--config", "bad.json", "run"]);
    assert_eq!(bad_config.status.code(), Some(2), "{}", stderr(&bad_config));
    let too_big = zsre(dir.path(), &["--config", "synth/config.json", "eval", "run", "--sizes", "99"]);
    assert_eq!(too_big.status.code(), Some(2), "{}", stderr(&too_big));

    // Stage failures: 3.
    let no_sideinfo = zsre(
        dir.path(),
        &["score", "--dataset", "synth/dataset.json", "--sideinfo", "absent.jsonl", "--out-dir", "o"],
    );
    assert_eq!(no_sideinfo.status.code(), Some(3), "{}", stderr(&no_sideinfo));
    assert!(stderr(&no_sideinfo).contains("score"));

    // Offline with a cold embedding cache fails without touching the network.
    let offline = zsre(
        dir.path(),
        &["--config", "synth/config.json", "--offline", "--embedding-cache", "cold.jsonl", "run", "--stages", "score"],
    );
    assert_eq!(offline.status.code(), Some(3), "{}", stderr(&offline));
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = zsre(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for sub in ["corpus", "sideinfo", "embed", "score", "eval", "gap", "explain", "run", "synth"] {
        assert!(text.contains(sub), "{sub}");
    }
}
