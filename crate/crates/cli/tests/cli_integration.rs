//! End-to-end checks of the `envi` binary: artifact schemas, exit codes,
//! config plumbing, and byte-level determinism of metrics.

use std::path::Path;
use std::process::Command;

fn envi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_envi"))
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn simulate_cartrack_writes_schema_conformant_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = envi()
        .args(["simulate", "--dataset", "cartrack", "--T", "120", "--seed", "0"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out.join("data.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,y1,y2,y3,y4,x1,x2,x3,x4"
    );
    assert_eq!(lines.count(), 120);
    // The effective config is echoed for reproducibility.
    let echo = read(&out.join("config.txt"));
    assert!(echo.contains("dataset=cartrack"));
    assert!(echo.contains("seed=0"));
    assert!(echo.contains("T=120"));
}

#[test]
fn simulate_then_train_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(envi()
        .args(["simulate", "--dataset", "kink", "--T", "40", "--seed", "3"])
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap()
        .success());
    let train = dir.path().join("train");
    let csv_arg = format!("csv:{}", sim.join("data.csv").display());
    let status = envi()
        .args([
            "train", "--dataset", &csv_arg, "--dx", "1", "--M", "4", "--N", "10", "--iters", "3",
            "--seed", "0",
        ])
        .arg("--out")
        .arg(&train)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(train.join("history.csv").exists());
    assert!(train.join("states.csv").exists());
    assert!(train.join("checkpoint.json").exists());
}

#[test]
fn train_emits_all_artifacts_and_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = envi()
            .args([
                "train", "--dataset", "kink", "--T", "30", "--M", "4", "--N", "10", "--iters",
                "5", "--seed", "7", "--sigmaR2", "0.08",
            ])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        out
    };
    let a = run("a");
    let b = run("b");
    for f in ["metrics.json", "config.txt", "history.csv", "states.csv", "checkpoint.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    assert_eq!(
        read(&a.join("metrics.json")),
        read(&b.join("metrics.json")),
        "same config + seed must give byte-identical metrics"
    );
    assert_eq!(read(&a.join("states.csv")), read(&b.join("states.csv")));

    let hist = read(&a.join("history.csv"));
    assert!(hist.starts_with("iteration,elbo,loglik,kl_x0,kl_u,grad_norm,seconds"));
    assert_eq!(hist.lines().count(), 6);

    let metrics: serde_json::Value = serde_json::from_str(&read(&a.join("metrics.json"))).unwrap();
    assert!(metrics.get("transition_mse").is_some());
    assert!(metrics.get("state_rmse").is_some());
}

#[test]
fn filter_oracle_kf_reports_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("kf");
    let status = envi()
        .args([
            "filter", "--oracle-kf", "--dataset", "cartrack", "--T", "120", "--seed", "0",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let metrics: serde_json::Value = serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();
    let rmse = metrics["state_rmse"].as_f64().unwrap();
    assert!(
        (0.45..=0.60).contains(&rmse),
        "oracle KF state RMSE {rmse} outside the expected band"
    );
    let obs = metrics["observation_rmse"].as_f64().unwrap();
    assert!(rmse < obs);
}

#[test]
fn predict_from_checkpoint_writes_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    assert!(envi()
        .args([
            "train", "--dataset", "kink", "--T", "30", "--M", "4", "--N", "10", "--iters", "3",
            "--seed", "1",
        ])
        .arg("--out")
        .arg(&train)
        .status()
        .unwrap()
        .success());
    let pred = dir.path().join("pred");
    let status = envi()
        .args(["predict", "--dataset", "kink", "--T", "30", "--seed", "1", "--horizon", "7"])
        .arg("--checkpoint")
        .arg(train.join("checkpoint.json"))
        .arg("--out")
        .arg(&pred)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&pred.join("predictions.csv"));
    assert!(csv.starts_with("h,y1_mean,y1_var"));
    assert_eq!(csv.lines().count(), 8);
}

#[test]
fn online_writes_objective_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("online");
    let status = envi()
        .args([
            "online", "--dataset", "kink", "--T", "25", "--M", "4", "--N", "10", "--seed", "2",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let hist = read(&out.join("history.csv"));
    assert_eq!(hist.lines().count(), 26);
    assert!(out.join("checkpoint.json").exists());
}

#[test]
fn unknown_flag_exits_2() {
    let status = envi().args(["train", "--definitely-not-a-flag"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "definitely_not_a_key=1\n").unwrap();
    let status = envi()
        .args(["train"])
        .arg("--config")
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unreadable_file_exits_3() {
    let status = envi()
        .args(["train", "--dataset", "csv:/definitely/not/here.csv"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "dataset=kink\nT=20\nseed=5\nM=4\nN=8\niters=2\n").unwrap();
    let out = dir.path().join("out");
    let status = envi()
        .args(["train", "--seed", "9"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let echo = read(&out.join("config.txt"));
    assert!(echo.contains("seed=9"), "flag should win: {echo}");
    assert!(echo.contains("T=20"));
}

#[test]
fn envi_threads_zero_is_rejected() {
    let status = envi()
        .args(["simulate", "--dataset", "kink", "--T", "5"])
        .env("ENVI_THREADS", "0")
        .status()
        .unwrap();
    assert_ne!(status.code(), Some(0));
}
