use std::path::Path;
use std::process::{Command, Output};

fn eventflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eventflow")).args(args).current_dir(dir).env("EVENTFLOW_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = eventflow(args, dir);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

const MODEL: [&str; 18] = [
    "--d-model", "8", "--layers", "1", "--heads", "2", "--max-events", "4", "--frames", "4", "--latent-frames", "16", "--channels", "8", "--text-tokens", "4",
    "--blocks", "1",
];

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["synth", "--out", "corpus.jsonl", "--clips", "40", "--classes", "5", "--max-events", "4", "--seed", "1"], dir);
    ok(&["curate", "--input", "corpus.jsonl", "--n-target", "16", "--adaptive", "--out", "manifest.jsonl", "--summary", "summary.json", "--seed", "1"], dir);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_target"], 16);

    let mut train = vec!["train", "--input", "corpus.jsonl", "--manifest", "manifest.jsonl", "--out", "model.bin", "--epochs", "2", "--report", "loss.json", "--seed", "1"];
    train.extend(MODEL);
    ok(&train, dir);
    let mut text = vec!["train", "--input", "corpus.jsonl", "--out", "text.bin", "--epochs", "1", "--text-only", "--seed", "1"];
    text.extend(MODEL);
    ok(&text, dir);

    ok(&["generate", "--model", "model.bin", "--input", "corpus.jsonl", "--out", "graph.lat", "--steps", "4", "--seed", "2"], dir);
    ok(&["generate", "--model", "text.bin", "--input", "corpus.jsonl", "--out", "text.lat", "--steps", "4", "--text-only", "--seed", "2"], dir);
    ok(&["pairs", "--input", "corpus.jsonl", "--candidates", "graph=graph.lat", "text=text.lat", "--out", "pairs.jsonl", "--latents-out", "pairs.lat"], dir);
    let pairs = std::fs::read_to_string(dir.join("pairs.jsonl")).unwrap();
    assert!(pairs.lines().count() > 0);
    for line in pairs.lines() {
        let p: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(p["delta"].as_f64().unwrap() > 0.0);
    }

    ok(
        &[
            "copo", "--model", "model.bin", "--input", "corpus.jsonl", "--pairs", "pairs.jsonl", "--latents", "pairs.lat", "--steps", "3", "--batch-size", "4", "--out",
            "tuned.bin", "--report", "copo.json", "--seed", "3",
        ],
        dir,
    );
    let eval = ok(&["evaluate", "--input", "corpus.jsonl", "--latents", "graph.lat"], dir);
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    for key in ["f1_event", "f1_clip"] {
        let v = metrics["f1"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

#[test]
fn report_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("config.json"),
        r#"{"seeds": [0], "d_model": 8, "L": 1, "heads": 2, "F": 4, "F_lat": 16, "D": 8, "text_tokens": 4, "blocks": 1,
            "epochs": 1, "steps": 4, "corpus": {"train_clips": 10, "test_clips": 4, "classes": 4},
            "sweep": {"gs": [0, 2]}}"#,
    )
    .unwrap();
    ok(&["report", "--config", "config.json", "--out", "a", "--seed", "5"], dir);
    ok(&["report", "--config", "config.json", "--out", "b", "--seed", "5"], dir);
    for file in ["metrics.json", "sweep_gs.csv"] {
        assert_eq!(std::fs::read(dir.join("a").join(file)).unwrap(), std::fs::read(dir.join("b").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(eventflow(&["--help"], dir).status.code(), Some(0));
    assert_eq!(eventflow(&["train", "--bogus"], dir).status.code(), Some(1));

    let missing = eventflow(&["curate", "--input", "nope.jsonl", "--out", "m.jsonl"], dir);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.jsonl"));

    std::fs::write(dir.join("bad.json"), r#"{"seeds": [0], "learning_rate": 1.0}"#).unwrap();
    let bad = eventflow(&["report", "--config", "bad.json", "--out", "out"], dir);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("learning_rate"));

    std::fs::write(dir.join("corpus.jsonl"), "{\"id\": \"x\", \"duration\": 10.0, \"events\": [{\"label\": \"dog\", \"onset\": 4.0, \"offset\": 2.0}]}\n").unwrap();
    let invalid = eventflow(&["curate", "--input", "corpus.jsonl", "--out", "m.jsonl"], dir);
    assert_eq!(invalid.status.code(), Some(1));

    // Writing over a directory is an I/O failure, not a problem with the input.
    std::fs::create_dir(dir.join("taken")).unwrap();
    let runtime = eventflow(&["synth", "--out", "taken", "--clips", "2"], dir);
    assert_eq!(runtime.status.code(), Some(2), "{}", String::from_utf8_lossy(&runtime.stderr));
}
