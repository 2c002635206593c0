use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ilf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilf")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = r#"{
  "seed": 1,
  "run_dir": "run",
  "backbone": { "image_size": 8, "patch_size": 2, "hidden_dim": 16, "n_heads": 2, "n_blocks": 4, "n_classes": 2, "T": 100 },
  "backbone_train": { "iterations": 3, "batch_size": 4 },
  "ilf": { "loop_start": 1, "loop_end": 2, "train": { "iterations": 2, "batch_size": 4 } },
  "cache": { "count": 2 },
  "data": { "source": "shapes", "seed": 2, "n_per_class": 4 },
  "sample": { "seed": 3, "n_samples": 2 },
  "bench": { "repeats": 1 }
}"#;
    let path = dir.join("tiny.json");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let train = ilf(&["train", &cfg]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    // run_dir is relative to the config file.
    assert!(dir.path().join("run/feedback.ckpt").is_file());

    for kind in ["baseline", "ilf", "cached"] {
        let o = ilf(&["sample", &cfg, "--kind", kind, "--out", &out(kind)]);
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(kind).join("sample_001.pgm").is_file());
        assert!(dir.path().join(kind).join("cost.csv").is_file());
    }
    assert!(ilf(&["drift", &cfg, "--out", &out("drift")]).status.success());
    assert!(dir.path().join("drift/drift_time_cached.csv").is_file());
    let bench = ilf(&["bench", &cfg]);
    assert!(bench.status.success());
    assert!(String::from_utf8_lossy(&bench.stdout).contains("block_forwards"));
    assert!(dir.path().join("run/bench.csv").is_file());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ilf(&["sample", &cfg, "--kind", "ilf", "--out", "unused"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"seed\": \"one\" }").unwrap();
    let o = ilf(&["train", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    assert!(!ilf(&["sample", &cfg, "--kind", "fast", "--out", "x"]).status.success());
}
