use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eraser(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eraser"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> PathBuf {
    let out = eraser(&["default-config", "synthetic2d"]);
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["output_dir"] = dir.join("results").to_string_lossy().into_owned().into();
    cfg["noise"]["rate"] = 0.2.into();
    cfg["optimizer"]["epochs"] = 4.into();
    cfg["seeds"] = serde_json::json!([0, 1]);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn only_subdir(dir: &Path) -> PathBuf {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.pop().unwrap()
}

#[test]
fn run_writes_the_result_bundle_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = eraser(&["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let dir = only_subdir(&tmp.path().join("results"));
    assert!(dir.join("config.json").exists());
    assert!(dir.join("aggregate.json").exists());
    for seed in ["seed0", "seed1"] {
        let s = dir.join(seed);
        for f in [
            "matrix.csv",
            "summary.json",
            "manifest.json",
            "density_task1.csv",
            "density_task2.csv",
            "erasure_task2.json",
            "activations_task1.csv",
            "checkpoints/task0.json",
            "checkpoints/task2.json",
        ] {
            assert!(s.join(f).exists(), "{seed}/{f} missing");
        }
    }

    let d = dir.to_str().unwrap();
    let report = eraser(&["report", d]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("mean"));
    assert!(dir.join("seed0/density_hist_task1.csv").exists());
    assert!(dir.join("seed0/projection_task2.csv").exists());

    let cmp = eraser(&["compare", d, d]);
    assert!(cmp.status.success());
    let text = String::from_utf8_lossy(&cmp.stdout).into_owned();
    assert_eq!(text.lines().count(), 4, "{text}");

    let ckpt = dir.join("seed0/checkpoints/task2.json");
    let eval = eraser(&["eval", ckpt.to_str().unwrap(), "1"]);
    assert!(eval.status.success());
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("task 1"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let c = cfg.to_str().unwrap();
    assert!(eraser(&["run", c, "--set", "seeds=[3]"]).status.success());
    let s = only_subdir(&tmp.path().join("results")).join("seed3");
    let full = fs::read_to_string(s.join("matrix.csv")).unwrap();

    // Simulate a crash during task 2: only the pre-task checkpoint survives.
    fs::remove_file(s.join("checkpoints/task2.json")).unwrap();
    fs::remove_file(s.join("summary.json")).unwrap();
    assert!(eraser(&["run", c, "--set", "seeds=[3]", "--resume"]).status.success());
    assert_eq!(fs::read_to_string(s.join("matrix.csv")).unwrap(), full);
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(eraser(&["run", c, "--set", "noise.rate=1.5"]).status.code(), Some(2));
    assert_eq!(eraser(&["run", c, "--set", "optimizer.momentum=0.9"]).status.code(), Some(2));
    assert_eq!(eraser(&["preview-noise", c, "--set", "num_tasks=3"]).status.code(), Some(2));
}

#[test]
fn preview_noise_reports_flips_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = eraser(&["preview-noise", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let tasks = m["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 2);
    assert!(tasks.iter().all(|t| t["noisy_count"].as_u64().unwrap() > 0));
    assert!(!tmp.path().join("results").exists());
}
