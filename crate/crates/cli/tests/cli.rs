use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use cgtp_core::metrics::{read_submissions, Submission};
use cgtp_core::model::{Cgtp, ModelConfig};
use cgtp_core::scene::{read_scenarios, Scenario, ScenarioKind};
use cgtp_core::training::Checkpoint;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgtp"))
        .current_dir(dir)
        .env("CGTP_THREADS", "1")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "cgtp {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn scenarios(path: &Path) -> Vec<Scenario<f64>> {
    read_scenarios(BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

fn submissions(path: &Path) -> Vec<Submission<f64>> {
    read_submissions(BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

/// Four scenarios and a one-epoch small model.
fn trained() -> TempDir {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "data.jsonl", "--count", "4", "--seed", "3"]);
    ok(
        d,
        &[
            "train", "--data", "data.jsonl", "--out", "model.json", "--preset", "small", "--epochs", "1", "--batch-size",
            "2",
        ],
    );
    dir
}

#[test]
fn generate_cycles_through_kinds() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["generate", "--out", "s.jsonl", "--count", "4"]);
    let s = scenarios(&dir.path().join("s.jsonl"));
    let kinds: Vec<ScenarioKind> = s.iter().map(|s| s.kind).collect();
    assert_eq!(kinds, ScenarioKind::ALL.to_vec());
    assert_eq!(fs::read_to_string(dir.path().join("s.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn generate_nothing_writes_an_empty_file() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["generate", "--out", "s.jsonl", "--count", "0"]);
    assert!(fs::read(dir.path().join("s.jsonl")).unwrap().is_empty());
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "a.jsonl", "--count", "6", "--seed", "11"]);
    ok(d, &["generate", "--out", "b.jsonl", "--count", "6", "--seed", "11"]);
    ok(d, &["generate", "--out", "c.jsonl", "--count", "6", "--seed", "12"]);
    let read = |n: &str| fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn missing_input_exits_with_path_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["train", "--data", "nope.jsonl", "--out", "m.json", "--epochs", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.jsonl"));
}

#[test]
fn malformed_line_is_named() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "s.jsonl", "--count", "1"]);
    let mut text = fs::read_to_string(d.join("s.jsonl")).unwrap();
    text.push_str("{\"not\": \"a scenario\"}\n");
    fs::write(d.join("s.jsonl"), text).unwrap();
    let out = run(d, &["train", "--data", "s.jsonl", "--out", "m.json", "--epochs", "0"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn bad_checkpoint_exits_with_checkpoint_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "s.jsonl", "--count", "1"]);
    fs::write(d.join("m.json"), "{\"format\": 1}").unwrap();
    let out = run(d, &["predict", "--data", "s.jsonl", "--checkpoint", "m.json", "--out", "p.jsonl"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn topk_mismatch_is_a_checkpoint_error() {
    let dir = trained();
    let out = run(
        dir.path(),
        &["predict", "--data", "data.jsonl", "--checkpoint", "model.json", "--out", "p.jsonl", "--topk", "3"],
    );
    assert_eq!(code(&out), 4);
}

#[test]
fn unknown_scenario_id_exits_with_missing_id() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "s.jsonl", "--count", "1"]);
    fs::write(
        d.join("p.jsonl"),
        "{\"scenario_id\":\"nowhere\",\"modes\":[{\"score\":1.0,\"traj_A\":[[0.0,0.0]],\"traj_B\":[[1.0,1.0]]}]}\n",
    )
    .unwrap();
    let out = run(d, &["eval", "--predictions", "p.jsonl", "--data", "s.jsonl", "--out", "m.csv"]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("nowhere"));
}

#[test]
fn keep_controls_the_mode_count() {
    let dir = trained();
    let d = dir.path();
    for keep in [25usize, 6] {
        let k = keep.to_string();
        ok(
            d,
            &["predict", "--data", "data.jsonl", "--checkpoint", "model.json", "--out", "p.jsonl", "--keep", &k],
        );
        let subs = submissions(&d.join("p.jsonl"));
        assert_eq!(subs.len(), 4);
        for s in &subs {
            assert_eq!(s.modes.len(), keep);
            for w in s.modes.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
        }
    }
    let out = run(
        d,
        &["predict", "--data", "data.jsonl", "--checkpoint", "model.json", "--out", "p.jsonl", "--keep", "26"],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_writes_one_row_per_metric_and_parsable_plots() {
    let dir = trained();
    let d = dir.path();
    ok(d, &["predict", "--data", "data.jsonl", "--checkpoint", "model.json", "--out", "p.jsonl"]);
    ok(
        d,
        &["eval", "--predictions", "p.jsonl", "--data", "data.jsonl", "--out", "m.csv", "--plots", "plots"],
    );
    let mut r = csv::Reader::from_path(d.join("m.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["metric", "regime", "value"]);
    let metrics: Vec<String> = r.records().map(|rec| rec.unwrap()[0].to_string()).collect();
    let mut unique = metrics.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), metrics.len(), "{metrics:?}");
    for m in ["minADE", "minFDE", "MR", "mAP", "OR", "CR"] {
        assert!(metrics.iter().any(|x| x == m), "{m} missing from {metrics:?}");
    }

    let plots: Vec<_> = fs::read_dir(d.join("plots")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(plots.len(), 4);
    for p in plots {
        let text = fs::read_to_string(&p).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
}

#[test]
fn zero_epochs_saves_the_initial_parameters() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "s.jsonl", "--count", "2"]);
    ok(
        d,
        &["train", "--data", "s.jsonl", "--out", "m.json", "--preset", "small", "--epochs", "0", "--seed", "7"],
    );
    let c = Checkpoint::<f64>::load(fs::File::open(d.join("m.json")).unwrap()).unwrap();
    let (_, store) = Cgtp::init::<f64>(ModelConfig::small(), 7);
    assert_eq!(c.epochs_completed, 0);
    assert_eq!(c.store, store);
    let log = fs::read_to_string(d.join("m.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "{log}");
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "s.jsonl", "--count", "4", "--seed", "5"]);
    let base = ["train", "--data", "s.jsonl", "--preset", "small", "--batch-size", "2"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let args = with(&["--epochs", "3", "--out", "full.json", "--log", "full.csv"]);
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let args = with(&["--epochs", "2", "--out", "part.json", "--log", "part.csv"]);
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let args = with(&["--epochs", "3", "--resume", "part.json", "--out", "resumed.json", "--log", "part.csv"]);
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());

    let full = fs::read_to_string(d.join("full.csv")).unwrap();
    let part = fs::read_to_string(d.join("part.csv")).unwrap();
    assert_eq!(full.lines().count(), 4);
    assert_eq!(full.lines().last(), part.lines().last());
    assert_eq!(full, part);
    assert_eq!(fs::read(d.join("full.json")).unwrap(), fs::read(d.join("resumed.json")).unwrap());
}
