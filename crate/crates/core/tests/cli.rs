use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
batch_size = 4
chunk_length = 5
updates_per_collection = 2
seed_episodes = 1
total_env_steps = 160
eval_episode_length = 40
eval_episodes = 1
checkpoint_every = 1

[env]
task = "pointmass_lite"
episode_length = 40

[model]
latent_dim = 3
recurrent_dim = 6
hidden_dim = 8

[behavior]
hidden_dim = 8
horizon = 3
imagination_starts = 6
"#;

fn tpc(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpc"))
        .args(args)
        .env("TPC_RUN_ROOT", root)
        .output()
        .expect("tpc binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "tpc failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = tpc(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    let v = stdout_json(&out);
    let dir = Path::new(v["run_dir"].as_str().unwrap()).to_path_buf();
    assert!(dir.starts_with(tmp.path()));
    assert_eq!(v["env_steps"], 160);

    for f in ["config.toml", "manifest.json", "metrics.jsonl", "metrics.csv", "status.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let status: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("status.json")).unwrap()).unwrap();
    assert_eq!(status["state"], "completed");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(dir.join("checkpoints/final.json").is_file());
    assert!(dir.join("checkpoints/iter_000001.json").is_file());

    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.lines().count() > 2);
    assert!(csv.contains("eval"));

    // A second run with the same stem lands in a fresh directory.
    let again = stdout_json(&tpc(&["train", "--config", cfg.to_str().unwrap()], tmp.path()));
    assert_ne!(again["run_dir"], v["run_dir"]);

    let ck = dir.join("checkpoints/final.json");
    let eval = stdout_json(&tpc(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "2"], tmp.path()));
    assert_eq!(eval["returns"].as_array().unwrap().len(), 2);

    let probe_dir = tmp.path().join("probe");
    let probe = stdout_json(&tpc(
        &[
            "probe",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--episodes",
            "3",
            "--holdout",
            "1",
            "--decoder-steps",
            "5",
            "--out",
            probe_dir.to_str().unwrap(),
        ],
        tmp.path(),
    ));
    assert!(probe["position_r2"].is_number());
    for f in ["probe_report.json", "probe_grid.png", "probe_grid.pgm"] {
        assert!(probe_dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn identical_manifests_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        stdout_json(&tpc(&["train", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()], tmp.path()));
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn bad_input_exits_nonzero_with_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, format!("{TINY}\n[loss]\nlambda9 = 1.0\n")).unwrap();
    let out = tpc(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "error");
    assert!(err["message"].as_str().unwrap().contains("loss.lambda9"));

    let out = tpc(&["eval", "--checkpoint", tmp.path().join("missing.json").to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    let out = tpc(&["train", "--set", "env.task=cartpole"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("cartpole").exists());
}

#[test]
fn overrides_are_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let dir = tmp.path().join("run");
    stdout_json(&tpc(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "loss.lambda2=0.05",
            "--seed",
            "9",
            "--out",
            dir.to_str().unwrap(),
        ],
        tmp.path(),
    ));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let overrides: Vec<&str> = manifest["overrides"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(overrides, ["loss.lambda2=0.05", "seed=9"]);
    let snapshot = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(snapshot.contains("lambda2 = 0.05"));
    assert!(snapshot.contains("seed = 9"));
}
