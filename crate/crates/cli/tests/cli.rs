use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/synthetic/config.toml")
}

fn methotax(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_methotax"))
        .args(args)
        .env_remove("METHOTAX_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stage(name: &str, out: &Path) -> Output {
    let config = fixture_config();
    methotax(&[name, "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()])
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn output_digests(out: &Path) -> Value {
    let manifest = read_json(&out.join("manifest.json"));
    let mut all = serde_json::Map::new();
    for record in manifest["stages"].as_object().unwrap().values() {
        for (k, v) in record["outputs"].as_object().unwrap() {
            all.insert(k.clone(), v.clone());
        }
    }
    Value::Object(all)
}

fn count_level(node: &Value, level: u64) -> usize {
    let here = usize::from(node["level"].as_u64() == Some(level));
    here + node["children"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| count_level(c, level))
        .sum::<usize>()
}

#[test]
fn run_all_on_the_fixture_emits_the_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let out = stage("run-all", dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tree = read_json(&dir.path().join("taxonomy.json"));
    assert_eq!(count_level(&tree, 3), 21);
    assert_eq!(count_level(&tree, 4), 15);
    assert_eq!(count_level(&tree, 5), 15);
    let html = std::fs::read_to_string(dir.path().join("taxonomy.html")).unwrap();
    assert_eq!(html.matches("<h4").count(), 15);
    assert!(html.contains("Evaluation indicators"));
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = stage("cluster", dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("embedding model not found; run `train`"), "{err}");

    let out = stage("export", dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `build`"));
}

#[test]
fn deterministic_runs_have_identical_digests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = fixture_config();
    for dir in [&a, &b] {
        let out = methotax(&[
            "run-all",
            "--config",
            config.to_str().unwrap(),
            "--output",
            dir.path().to_str().unwrap(),
            "--deterministic",
            "--seed",
            "11",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let da = output_digests(a.path());
    assert_eq!(da.as_object().unwrap().len(), 16);
    assert_eq!(da, output_digests(b.path()));
}

#[test]
fn stage_by_stage_matches_run_all() {
    let whole = tempfile::tempdir().unwrap();
    assert!(stage("run-all", whole.path()).status.success());
    let steps = tempfile::tempdir().unwrap();
    for name in ["ingest", "train", "assign", "cluster", "evaluate", "build", "export"] {
        let out = stage(name, steps.path());
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(output_digests(whole.path()), output_digests(steps.path()));
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config();
    let out = Command::new(env!("CARGO_BIN_EXE_methotax"))
        .args(["ingest", "--config", config.to_str().unwrap()])
        .env("METHOTAX_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("tokens.jsonl").is_file());
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(methotax(&["run-all"]).status.code(), Some(1));
    assert_eq!(methotax(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(methotax(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config();
    let out = methotax(&[
        "assign",
        "--config",
        config.to_str().unwrap(),
        "--output",
        dir.path().to_str().unwrap(),
        "--set",
        "sweeps.ap.preference_step=0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweeps.ap.preference_step"));
}

#[test]
fn malformed_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.jsonl"), "{\"doc_id\": \"a\", \"text\": 3}\n").unwrap();
    std::fs::write(dir.path().join("lexicon.tsv"), "x\t5\n").unwrap();
    std::fs::write(
        dir.path().join("config.toml"),
        "[paths]\ncorpus = \"corpus.jsonl\"\nlexicon = \"lexicon.tsv\"\n",
    )
    .unwrap();
    let out = methotax(&[
        "ingest",
        "--config",
        dir.path().join("config.toml").to_str().unwrap(),
        "--output",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
