//! End-to-end checks of the `ptd` binary: artifacts, exit codes, and
//! command-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ptd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ptd"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let text = r#"{
  "arch": {"preset": "mini_vgg:2x8:4"},
  "data": {
    "source": {"kind": "blobs", "classes": 4, "channels": 2, "height": 8,
               "width": 8, "per_class": 30, "noise_std": 0.2, "test_fraction": 0.2},
    "val_fraction": 0.1
  },
  "seed": 0,
  "train": {"epochs": 3, "batch_size": 32, "lr": 0.1, "lr_drops": [2],
            "drop_factor": 0.2, "weight_decay": 0.0005, "momentum": 0.9},
  "prune": {"rate_per_iteration": 0.2, "iterations": 2, "post_epochs": 2,
            "post_batch_size": 32, "post_lr": 0.1, "post_lr_drops": [1],
            "post_drop_factor": 0.1, "post_weight_decay": 0.0002,
            "method": "magnitude_lr_rewind"},
  "distill": {
    "kd": {"alpha": 0.95, "tau": 10.0, "tau_sq_scaling": true},
    "schedule": {"epochs": 3, "batch_size": 32, "lr": 0.1, "lr_drops": [2],
                 "drop_factor": 0.2, "weight_decay": 0.0005, "momentum": 0.9}
  }
}"#;
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn ptd");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn train_writes_artifacts_and_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(ptd()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .args(["--seed", "0", "--deterministic"]));
    }
    for name in ["checkpoint.ptdl", "report.csv", "metrics.csv", "config.json"] {
        let a = read(&out_a.join(name));
        assert!(!a.is_empty(), "{name} empty");
        assert_eq!(a, read(&out_b.join(name)), "{name} differs between reruns");
    }
    // the resolved config embeds the seed
    let resolved = String::from_utf8(read(&out_a.join("config.json"))).unwrap();
    assert!(resolved.contains("\"seed\": 0"));
}

#[test]
fn missing_data_path_exits_2_and_names_path_in_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idx.json");
    std::fs::write(
        &path,
        r#"{
  "arch": {"preset": "mini_vgg:1x8:4"},
  "data": {"source": {"kind": "idx", "train_images": "missing-images.idx",
           "train_labels": "missing-labels.idx"}},
  "train": {"epochs": 1, "batch_size": 8, "lr": 0.1}
}"#,
    )
    .unwrap();
    let out = ptd()
        .args(["train", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing-images.idx"), "stderr: {err}");
}

#[test]
fn config_typo_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    std::fs::write(
        &path,
        r#"{"arch": {"preset": "mini_vgg:1x8:4"},
            "data": {"source": {"kind": "blobs", "classes": 2, "channels": 1, "height": 8,
                     "width": 8, "per_class": 8, "noise_std": 0.1}},
            "trian": {"epochs": 1}}"#,
    )
    .unwrap();
    let out = ptd()
        .args(["train", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_epoch_training_returns_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("zero.json");
    let text = std::fs::read_to_string(tiny_config(dir.path())).unwrap();
    std::fs::write(&cfg_path, text.replace("\"epochs\": 3", "\"epochs\": 0")).unwrap();
    let out = dir.path().join("out");
    run_ok(ptd()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "5", "--deterministic"]));
    let ckpt =
        ptd_core::checkpoint::MaskedCheckpoint::<f32>::load(&out.join("checkpoint.ptdl")).unwrap();
    let arch = ptd_core::presets::mini_vgg(2, 8, 4);
    let init = ptd_core::params::ParamSet::<f32>::init(&arch, 5).unwrap();
    assert_eq!(ckpt.params, init);
}

#[test]
fn full_pipeline_chain_runs_and_artefacts_connect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let teacher_out = dir.path().join("teacher");
    run_ok(ptd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&teacher_out)
        .args(["--seed", "0", "--deterministic"]));

    // prune to 36% -> exactly 2 iterations logged
    let prune_out = dir.path().join("pruned");
    run_ok(ptd()
        .args(["prune", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&prune_out)
        .arg("--checkpoint")
        .arg(teacher_out.join("checkpoint.ptdl"))
        .args(["--target-sparsity", "0.36", "--seed", "0", "--deterministic"]));
    let prune_report = String::from_utf8(read(&prune_out.join("prune_report.csv"))).unwrap();
    assert_eq!(prune_report.lines().count(), 3, "{prune_report}"); // header + 2 iterations
    let ckpt =
        ptd_core::checkpoint::MaskedCheckpoint::<f32>::load(&prune_out.join("checkpoint.ptdl"))
            .unwrap();
    let total = ckpt.masks.total_bits() as f64;
    assert!((ckpt.sparsity() - 0.36).abs() <= 1.0 / total);

    // derive the student; the emitted architecture reloads and validates
    let student_out = dir.path().join("student");
    run_ok(ptd()
        .args(["make-student", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&student_out)
        .arg("--checkpoint")
        .arg(prune_out.join("checkpoint.ptdl"))
        .args(["--seed", "0"]));
    let arch_text = String::from_utf8(read(&student_out.join("student_arch.json"))).unwrap();
    let student_arch: ptd_core::arch::ArchitectureSpec =
        serde_json::from_str(&arch_text).unwrap();
    student_arch.validate().unwrap();
    let census = String::from_utf8(read(&student_out.join("census.csv"))).unwrap();
    assert!(census.starts_with("layer,kernel_area,teacher_nonzero,channels"));

    // distill the pruned teacher into the derived student
    let distill_out = dir.path().join("distilled");
    run_ok(ptd()
        .args(["distill", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&distill_out)
        .arg("--teacher")
        .arg(prune_out.join("checkpoint.ptdl"))
        .arg("--student")
        .arg(student_out.join("student_arch.json"))
        .args(["--seed", "0", "--deterministic"]));
    let metrics = String::from_utf8(read(&distill_out.join("metrics.csv"))).unwrap();
    assert!(metrics.contains("agreement"), "{metrics}");
    assert!(metrics.contains("test_acc"), "{metrics}");

    // eval the student checkpoint against the teacher
    let eval_out = dir.path().join("eval");
    run_ok(ptd()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&eval_out)
        .arg("--checkpoint")
        .arg(distill_out.join("checkpoint.ptdl"))
        .arg("--teacher")
        .arg(prune_out.join("checkpoint.ptdl"))
        .args(["--seed", "0"]));
    let eval_metrics = String::from_utf8(read(&eval_out.join("metrics.csv"))).unwrap();
    assert!(eval_metrics.contains("accuracy"));
    assert!(eval_metrics.contains("agreement"));

    // aggregate the runs
    let summary = dir.path().join("summary.csv");
    run_ok(ptd()
        .args(["report", "--out"])
        .arg(&summary)
        .arg(&teacher_out)
        .arg(&prune_out)
        .arg(&distill_out));
    let text = String::from_utf8(read(&summary)).unwrap();
    assert!(text.starts_with("run,dir"));
    assert!(text.contains("mean"));
}

#[test]
fn distill_with_mismatched_classes_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let teacher_out = dir.path().join("teacher");
    run_ok(ptd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&teacher_out)
        .args(["--seed", "0", "--deterministic"]));
    // student arch with a different class count
    let bad_arch = ptd_core::presets::mini_vgg(2, 8, 7);
    let bad_path = dir.path().join("bad_arch.json");
    std::fs::write(&bad_path, serde_json::to_string(&bad_arch).unwrap()).unwrap();
    let out = ptd()
        .args(["distill", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("--teacher")
        .arg(teacher_out.join("checkpoint.ptdl"))
        .arg("--student")
        .arg(&bad_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn prune_below_current_sparsity_exits_1_and_synflow_logs_no_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let teacher_out = dir.path().join("teacher");
    run_ok(ptd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&teacher_out)
        .args(["--seed", "0", "--deterministic"]));
    let pruned_out = dir.path().join("pruned59");
    run_ok(ptd()
        .args(["prune", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&pruned_out)
        .arg("--checkpoint")
        .arg(teacher_out.join("checkpoint.ptdl"))
        .args(["--target-sparsity", "0.59", "--seed", "0", "--deterministic"]));
    // asking for less sparsity than the checkpoint already has
    let out = ptd()
        .args(["prune", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x"))
        .arg("--checkpoint")
        .arg(pruned_out.join("checkpoint.ptdl"))
        .args(["--target-sparsity", "0.2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // synflow with post_epochs 0: single logged round, no fine-tune epochs
    let text = std::fs::read_to_string(&cfg).unwrap();
    let no_ft = dir.path().join("noft.json");
    std::fs::write(&no_ft, text.replace("\"post_epochs\": 2", "\"post_epochs\": 0")).unwrap();
    let syn_out = dir.path().join("synflow");
    run_ok(ptd()
        .args(["prune", "--config"])
        .arg(&no_ft)
        .arg("--out")
        .arg(&syn_out)
        .arg("--checkpoint")
        .arg(teacher_out.join("checkpoint.ptdl"))
        .args(["--target-sparsity", "0.5", "--method", "synflow", "--seed", "0"]));
    let report = String::from_utf8(read(&syn_out.join("prune_report.csv"))).unwrap();
    let row = report.lines().nth(1).unwrap();
    assert!(row.ends_with(",0"), "no fine-tune epochs expected: {row}");
    let ckpt =
        ptd_core::checkpoint::MaskedCheckpoint::<f32>::load(&syn_out.join("checkpoint.ptdl"))
            .unwrap();
    let total = ckpt.masks.total_bits() as f64;
    assert!((ckpt.sparsity() - 0.5).abs() <= 1.0 / total);
}

#[test]
fn corrupt_checkpoint_magic_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let bad = dir.path().join("bad.ptdl");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let out = ptd()
        .args(["make-student", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("--checkpoint")
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seeds_driver_writes_per_seed_dirs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("multi");
    run_ok(ptd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seeds", "0,1", "--deterministic"]));
    assert!(out.join("seed0/checkpoint.ptdl").exists());
    assert!(out.join("seed1/checkpoint.ptdl").exists());
    let summary = String::from_utf8(read(&out.join("summary.csv"))).unwrap();
    assert!(summary.starts_with("metric,seed0,seed1,mean,std"), "{summary}");
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("verify");
    let output = run_ok(ptd()
        .args(["verify", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--deterministic"]));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("PASS gradcheck_ce"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
    let csv = String::from_utf8(read(&out.join("verify_report.csv"))).unwrap();
    assert!(csv.contains("vgg19_per_layer_weights,true"));
    assert!(csv.contains("kd_equals_lsr,true"));
}
