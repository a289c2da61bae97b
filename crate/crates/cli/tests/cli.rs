use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_v1t"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("v1t-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn v1t")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &[&str] = &[
    "--set", "n_mice=2", "--set", "n_neurons=10", "--set", "n_train=48", "--set", "n_val=16",
    "--set", "n_test_images=4", "--set", "n_repeats=3", "--set", "height=18", "--set", "width=32",
];

const TINY_MODEL: &[&str] = &[
    "--set", "num_blocks=1", "--set", "embed_dim=8", "--set", "num_heads=2", "--set", "mlp_size=8",
    "--set", "target_h=18", "--set", "target_w=32",
];

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["synth", "--out", data.to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(SMALL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--max-epochs", "2", "--quiet"];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn unknown_flags_and_keys_are_usage_errors() {
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    let dir = scratch("usage");
    let data = synth(&dir);
    let o = train(&data, &dir.join("run"), &["--set", "no_such_key=1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = train(&data, &dir.join("run"), &["--mode", "cnn"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = scratch("missing");
    let o = train(&dir.join("nowhere"), &dir.join("run"), &[]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_evaluate_rollout_export_pipeline() {
    let dir = scratch("pipeline");
    let data = synth(&dir);
    let run_dir = dir.join("run");
    let o = train(&data, &run_dir, &["--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(run_dir.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("seed=11"));
    assert!(resolved.contains("embed_dim=8"));
    let curves = fs::read_to_string(run_dir.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3, "header plus one row per epoch");

    let ckpt = run_dir.join("checkpoint");
    let c = ckpt.to_str().unwrap();
    let d = data.to_str().unwrap();
    let eval = dir.join("eval");
    let o = run(&["evaluate", "--checkpoint", c, "--data", d, "--out", eval.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("Mouse A") && table.contains("Avg."), "{table}");
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(report.starts_with("mouse_id,split,mode,n_trials,correlation"));
    assert!(report.contains("pupil_relative_improvement"));

    let roll = dir.join("roll");
    let o = run(&["rollout", "--checkpoint", c, "--data", d, "--out", roll.to_str().unwrap(), "--heatmaps", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(roll.join("rollout_summary.csv").exists());
    let com = fs::read_to_string(roll.join("com_A.csv")).unwrap();
    assert_eq!(com.lines().count(), 1 + 12);
    let maps: Vec<_> = fs::read_dir(roll.join("heatmaps_A")).unwrap().collect();
    assert_eq!(maps.len(), 2, "grayscale map and overlay");

    let pos = dir.join("pos");
    let o = run(&["export-positions", "--checkpoint", c, "--data", d, "--out", pos.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(pos.join("positions_B.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn identical_invocations_give_identical_checkpoints() {
    let dir = scratch("determinism");
    let data = synth(&dir);
    for name in ["a", "b"] {
        let o = train(&data, &dir.join(name), &["--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["checkpoint/params.f32", "checkpoint/manifest.txt", "curves.csv"] {
        let a = fs::read(dir.join("a").join(file)).unwrap();
        let b = fs::read(dir.join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn ensemble_checkpoints_evaluate_as_one_predictor() {
    let dir = scratch("ensemble");
    let data = synth(&dir);
    let run_dir = dir.join("run");
    let o = train(&data, &run_dir, &["--ensemble", "3", "--keep", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let index = fs::read_to_string(run_dir.join("checkpoint/ensemble.txt")).unwrap();
    assert!(index.contains("members=2"));
    let o = run(&[
        "evaluate", "--checkpoint", run_dir.join("checkpoint").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", dir.join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("×2"));
}

#[test]
fn linear_baseline_has_no_rollout() {
    let dir = scratch("linear");
    let data = synth(&dir);
    let run_dir = dir.join("run");
    let o = train(&data, &run_dir, &["--mode", "linear"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "rollout", "--checkpoint", run_dir.join("checkpoint").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", dir.join("roll").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_command_passes() {
    let dir = scratch("gradcheck");
    let o = run(&["gradcheck", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = fs::read_to_string(dir.join("gradcheck.txt")).unwrap();
    assert_eq!(table.lines().count(), 12);
    assert!(!table.contains("FAIL"));
}
