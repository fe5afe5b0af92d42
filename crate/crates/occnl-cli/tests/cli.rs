//! End-to-end tests driving the `occnl` binary.

use std::path::Path;
use std::process::{Command, Output};

use occnl::ocv1;
use occnl::voxel::{Dims, VoxelGrid, VoxelMask};

fn occnl_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_occnl"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let output = occnl_cmd().args(args).current_dir(dir).output().expect("spawn occnl");
    assert!(
        output.status.success(),
        "occnl {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

const SMALL_CONFIG: &str = r#"
seed = 9

[scene]
nx = 20
ny = 20
nz = 6
num_frames = 7
reference_frame = 3
num_semantic = 6
dynamic_classes = [5, 6]
ground_height = 1
ground_class = 1
patch_budget = 18
patch_decay = 0.6
max_patch_extent = 3

[[scene.objects]]
class = 5
extents = [3, 2, 2]
velocity = [1, 0, 0]
spawn = [2, 4, 1]

[features]
dim = 8
separation = 4.0
noise_sigma = 0.8

[dataset]
train_scenes = 2
eval_scenes = 1

[noise]
kind = "asymmetric"
eta = 0.5

[train]
epochs = 5
warmup_epochs = 3
lr = 2.0
lr_decay_epoch = 5
lr_decay_factor = 0.1
architecture = "linear"
batch_scenes = 1
k_start = 4
k_end = 2
gamma = 1
k_strategy = "linear"
tau_s = 3.0
sntd_reduction = "mean"
ema_momentum = 0.9
prototype_momentum = 0.99
prototype_fusion_weight = 0.5
candidate_sources = "union"
include_noisy_label = false
loss_pll = true
loss_nl = true
loss_sntd = true
"#;

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let output = occnl_cmd().arg("frobnicate").output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn inject_noise_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let grid = VoxelGrid::from_labels(
        Dims::new(10, 10, 2),
        (0..200).map(|i| (i % 7) as u16).collect(),
    )
    .unwrap();
    ocv1::write_grid_file(&grid, dir.path().join("clean.ocv1")).unwrap();

    for name in ["a.ocv1", "b.ocv1"] {
        run_ok(
            &[
                "inject-noise",
                "--input",
                "clean.ocv1",
                "--output",
                name,
                "--classes",
                "6",
                "--eta",
                "0.5",
                "--seed",
                "7",
            ],
            dir.path(),
        );
    }
    let a = std::fs::read(dir.path().join("a.ocv1")).unwrap();
    let b = std::fs::read(dir.path().join("b.ocv1")).unwrap();
    assert_eq!(a, b);
    let noisy = ocv1::read_grid_file(dir.path().join("a.ocv1")).unwrap();
    assert_ne!(noisy.labels(), grid.labels());
}

#[test]
fn refine_without_dynamic_voxels_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(6, 6, 2);
    // Classes 1..4 are static under --dynamic 5.
    let grid = VoxelGrid::from_labels(dims, (0..72).map(|i| (i % 4) as u16).collect()).unwrap();
    ocv1::write_grid_file(&grid, dir.path().join("grid.ocv1")).unwrap();
    ocv1::write_mask_file(&VoxelMask::empty(dims), dir.path().join("mask.ocv1")).unwrap();
    run_ok(
        &[
            "refine",
            "--grid",
            "grid.ocv1",
            "--mask",
            "mask.ocv1",
            "--output",
            "refined.ocv1",
            "--classes",
            "6",
            "--dynamic",
            "5",
        ],
        dir.path(),
    );
    let original = std::fs::read(dir.path().join("grid.ocv1")).unwrap();
    let refined = std::fs::read(dir.path().join("refined.ocv1")).unwrap();
    assert_eq!(original, refined);
}

#[test]
fn run_pipeline_writes_artifacts_and_honors_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), SMALL_CONFIG).unwrap();
    run_ok(
        &["run", "--config", "exp.toml", "--out", "results"],
        dir.path(),
    );
    let run_dir = dir.path().join("results/asymmetric_light_seed9");
    for artifact in ["config.toml", "history.csv", "metrics.csv", "metrics.json", "checkpoint.dprc"]
    {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn out_root_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), SMALL_CONFIG).unwrap();
    let output = occnl_cmd()
        .args(["run", "--config", "exp.toml", "--seed", "10"])
        .env("OCCNL_OUT", "from_env")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(dir.path().join("from_env/asymmetric_light_seed10/metrics.csv").exists());
}

#[test]
fn eta_override_changes_the_noise_block() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), SMALL_CONFIG).unwrap();
    run_ok(
        &["run", "--config", "exp.toml", "--out", "o", "--eta", "0.9"],
        dir.path(),
    );
    let metrics = std::fs::read_to_string(
        dir.path().join("o/asymmetric_heavy_seed9/metrics.csv"),
    )
    .unwrap();
    assert!(metrics.lines().nth(1).unwrap().contains("asymmetric,heavy"));
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("{SMALL_CONFIG}\n[sweep]\netas = [0.5, 0.7, 0.9]\n");
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    run_ok(&["sweep", "--config", "exp.toml", "--out", "s"], dir.path());
    let combined = std::fs::read_to_string(dir.path().join("s/metrics.csv")).unwrap();
    let data_lines: Vec<&str> = combined.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(data_lines.len(), 3);
    assert!(data_lines.iter().any(|l| l.contains(",light,")));
    assert!(data_lines.iter().any(|l| l.contains(",moderate,")));
    assert!(data_lines.iter().any(|l| l.contains(",heavy,")));
}

#[test]
fn gen_scenes_train_evaluate_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), SMALL_CONFIG).unwrap();

    run_ok(&["gen-scenes", "--config", "exp.toml", "--out", "o"], dir.path());
    let scenes = dir.path().join("o/asymmetric_light_seed9/scenes");
    assert!(scenes.join("train_0/frame_000.ocv1").exists());
    assert!(scenes.join("train_0/clean_gt.ocv1").exists());
    assert!(scenes.join("eval_0/mask_003.ocv1").exists());

    run_ok(&["train", "--config", "exp.toml", "--out", "o"], dir.path());
    let run_dir = dir.path().join("o/asymmetric_light_seed9");
    assert!(run_dir.join("history.csv").exists());
    assert!(run_dir.join("checkpoint.dprc").exists());

    // Evaluate a grid against itself: perfect scores.
    let gt = scenes.join("train_0/clean_gt.ocv1");
    let output = run_ok(
        &[
            "evaluate",
            "--pred",
            gt.to_str().unwrap(),
            "--gt",
            gt.to_str().unwrap(),
            "--classes",
            "6",
            "--output",
            "eval.csv",
        ],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("IoU 100.00"), "{stdout}");
    assert!(dir.path().join("eval.csv").exists());

    // Report over the trained run's metrics requires a pipeline run first.
    run_ok(&["run", "--config", "exp.toml", "--out", "o"], dir.path());
    let output = run_ok(
        &["report", "--runs", run_dir.to_str().unwrap()],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("run_id,noise_kind,noise_level,iou,miou"), "{stdout}");
}

#[test]
fn threads_flag_prints_the_determinism_notice() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), SMALL_CONFIG).unwrap();
    let output = occnl_cmd()
        .args(["run", "--config", "exp.toml", "--out", "t", "--threads", "2"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("bit-determinism"), "{stderr}");
}

#[test]
fn invalid_config_names_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), format!("{SMALL_CONFIG}\ntypo_key = 1\n"))
        .unwrap();
    let output = occnl_cmd()
        .args(["run", "--config", "bad.toml"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("typo_key"), "{stderr}");
}
