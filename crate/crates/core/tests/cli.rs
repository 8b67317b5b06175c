mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{small_config, write_config};

fn dptwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dptwin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = dptwin(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_corpus_writes_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(&dir.path().join("a")));
    ok(&["gen-corpus", "--config", s(&cfg)]);
    ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&dir.path().join("b"))]);
    for f in [
        "public.jsonl",
        "private-train.jsonl",
        "private-test.jsonl",
        "manifest.json",
    ] {
        let a = fs::read(dir.path().join("a/corpus").join(f)).unwrap();
        let b = fs::read(dir.path().join("b/corpus").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let m = json(&dir.path().join("a/corpus/manifest.json"));
    assert_eq!(m["counts"]["train_records"], 40);
    assert_eq!(m["counts"]["test_records"], 8);

    ok(&[
        "gen-corpus",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert_ne!(
        fs::read(dir.path().join("a/corpus/private-train.jsonl")).unwrap(),
        fs::read(dir.path().join("c/corpus/private-train.jsonl")).unwrap()
    );
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    let o = dptwin(&["gen-corpus", "--config", s(&cfg), "--train-fraction", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train_fraction"));
    let o = dptwin(&["train", "--config", s(&cfg), "--epsilon", "-3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dptwin(&["gen-corpus", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_private_training_leaves_an_empty_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    ok(&["gen-corpus", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg), "--epsilon", "inf"]);
    let l = json(&dir.path().join("model/ledger.json"));
    assert_eq!(l["ledger"]["entries"].as_array().map(Vec::len), Some(0), "{l}");
    assert!(l["summary"]["epsilon"].is_null());
}

#[test]
fn corrupt_checkpoint_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    ok(&["gen-corpus", "--config", s(&cfg)]);
    let bad = dir.path().join("broken.bin");
    fs::write(&bad, b"DPTWIN01 not really").unwrap();
    let o = dptwin(&["generate", "--config", s(&cfg), "--checkpoint", s(&bad)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.bin"));
}

#[test]
fn evaluating_the_real_data_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    ok(&["gen-corpus", "--config", s(&cfg)]);
    let train = dir.path().join("corpus/private-train.jsonl");
    ok(&["evaluate", "--config", s(&cfg), "--synthetic", s(&train)]);
    let r = json(&dir.path().join("report/report.json"));
    assert!(r["duplicates"]["synthetic_records"].as_u64().unwrap() >= 40);
    assert!((r["similarity"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    for key in ["duplicates", "canaries", "utility", "similarity", "metadata"] {
        assert!(r.get(key).is_some(), "report lacks {key}");
    }
    assert!(r["utility"][0]["dp_real_accuracy"].is_number());

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = dptwin(&["evaluate", "--config", s(&cfg), "--synthetic", s(&empty)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn pipeline_reports_the_ledger_epsilon_and_skips_current_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    ok(&["pipeline", "--config", s(&cfg)]);
    let m = json(&dir.path().join("manifest.json"));
    let meta = json(&dir.path().join("synthetic/metadata.json"));
    let ledger = json(&dir.path().join("model/ledger.json"));
    let spent = ledger["summary"]["epsilon"].as_f64().unwrap();
    assert!(spent > 0.0 && spent <= 8.0);
    assert_eq!(m["stages"]["train"]["info"]["epsilon"].as_f64(), Some(spent));
    assert_eq!(meta["epsilon"].as_f64(), Some(spent));
    let report = json(&dir.path().join("report/report.json"));
    assert_eq!(report["metadata"]["spent_epsilon"].as_f64(), Some(spent));

    let before = fs::metadata(dir.path().join("model/checkpoint.bin"))
        .unwrap()
        .modified()
        .unwrap();
    ok(&["pipeline", "--config", s(&cfg)]);
    let after = fs::metadata(dir.path().join("model/checkpoint.bin"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(before, after);
    assert_eq!(json(&dir.path().join("manifest.json")), m);
}
