use std::process::{Command, Output};

fn opengc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opengc"))
        .args(args)
        .env("OPENGC_THREADS", "1")
        .output()
        .unwrap()
}

const FIXTURE: &str = r#"{
  "first_task": 1,
  "openset": "softmax",
  "performance_matrix": [[1.0, 0.5, 0.5], [null, 1.0, 0.5], [null, null, 1.0]],
  "per_task_accuracy": [1.0, 1.0, 1.0],
  "map": 0.8055555555555556,
  "config_hash": "fixture",
  "seeds": {"seed": 0, "split_seed": 0, "train_seed": 0}
}"#;

#[test]
fn report_prints_the_fixture_map() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.json");
    std::fs::write(&path, FIXTURE).unwrap();
    let out = opengc(&["report", "--metrics", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("task_i\ttask_j\taccuracy\n"));
    assert!(text.trim_end().ends_with("mAP\t0.805556"), "{text}");
}

#[test]
fn generate_then_condense_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny");
    let d = data.to_str().unwrap();
    assert!(opengc(&["generate", "--preset", "drift", "--seed", "2", "--out", d])
        .status
        .success());
    let out = opengc(&[
        "condense",
        "--data",
        d,
        "--task",
        "1",
        "--seed",
        "1",
        "--set",
        "max_iters=5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta = std::fs::read_to_string(data.join("condensed_t1/meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["ratio"], 0.01);
    assert_eq!(meta["num_nodes"], 3);
    assert_eq!(meta["task_index"], 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    // usage and configuration errors
    assert_eq!(opengc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        opengc(&["generate", "--preset", "yelp", "--seed", "1", "--out", d])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(opengc(&["condense", "--data", d, "--task", "1"]).status.code(), Some(1));
    assert_eq!(
        opengc(&["condense", "--data", d, "--task", "1", "--seed", "1", "--set", "nope=1"])
            .status
            .code(),
        Some(1)
    );
    // missing or malformed data
    assert_eq!(
        opengc(&["condense", "--data", d, "--task", "1", "--seed", "1"])
            .status
            .code(),
        Some(2)
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(
        opengc(&["report", "--metrics", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(opengc(&["--help"]).status.code(), Some(0));
}

#[test]
fn readme_config_block_is_the_default_configuration() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme
        .split_once("The main keys and their defaults:\n\n```\n")
        .and_then(|(_, rest)| rest.split_once("```"))
        .map(|(b, _)| b)
        .unwrap();
    let parsed = opengc::config::RunConfig::parse_str(block).unwrap();
    assert_eq!(parsed.fingerprint(), opengc::config::RunConfig::default().fingerprint());
}
