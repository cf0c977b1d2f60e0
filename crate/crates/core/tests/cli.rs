use std::path::PathBuf;
use std::process::Command;

fn smoke() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn srki(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_srki")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn steps_run_in_order_and_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = (smoke(), dir.path().to_path_buf());
    let base = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for step in ["gen-data", "train-stage1", "identify-layer", "train-stage2", "eval", "bench-memory", "ablate"] {
        let o = srki(&[&base[..], &[step]].concat());
        assert_eq!(o.status.code(), Some(0), "{step}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["qa.jsonl", "qa_test.jsonl", "entries.jsonl", "adapters_stage2.srki", "layer_table.json", "metrics.json", "metrics.csv", "memory.csv", "ablation.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("layer_table.json")).unwrap()).unwrap();
    assert_eq!(table["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_inputs_and_bad_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let out = dir.path().to_str().unwrap();
    let o = srki(&["--config", cfg.to_str().unwrap(), "--out", out, "train-stage2"]);
    assert_eq!(o.status.code(), Some(1));

    let mut bad: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    bad["stage2"]["k_train"] = serde_json::json!(1000);
    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, bad.to_string()).unwrap();
    let o = srki(&["--config", bad_path.to_str().unwrap(), "--out", out, "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k_train"));

    assert_eq!(srki(&["no-such-step"]).status.code(), Some(1));
}

#[test]
fn seed_flag_changes_the_data() {
    let cfg = smoke();
    let read = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = srki(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", seed, "gen-data"]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join("triples.jsonl")).unwrap()
    };
    assert_eq!(read("3"), read("3"));
    assert_ne!(read("3"), read("4"));
}
