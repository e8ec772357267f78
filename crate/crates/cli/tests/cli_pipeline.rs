//! Pipeline-level behavior of the command-line surface: stage ordering,
//! locking, seed overrides, and rerun determinism on a miniature config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use mpt_cli::{run, Cli, Command};

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mpt-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn tiny_overrides() -> Vec<String> {
    [
        "train_size=64",
        "dev_size=16",
        "test_size=16",
        "teacher_epochs=1",
        "source_epochs=1",
        "target_epochs=1",
        "seeds=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn invoke(out: &Path, command: Command, extra: &[&str]) -> anyhow::Result<()> {
    let mut overrides = tiny_overrides();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    run(&Cli {
        config: None,
        out: out.to_path_buf(),
        seed: None,
        overrides,
        command,
    })
}

fn read_manifest(out: &Path) -> String {
    fs::read_to_string(out.join("manifest.txt")).expect("manifest exists")
}

#[test]
fn stages_require_their_inputs() {
    let out = tmpdir("ordering");
    let err = invoke(&out, Command::TrainTeachers, &[]).unwrap_err();
    assert!(format!("{err:#}").contains("gen-tasks"), "{err:#}");

    invoke(&out, Command::GenTasks, &[]).unwrap();
    let err = invoke(&out, Command::TrainSource, &[]).unwrap_err();
    assert!(format!("{err:#}").contains("train-teachers"), "{err:#}");

    let err = invoke(&out, Command::AdaptTarget, &[]).unwrap_err();
    assert!(format!("{err:#}").contains("model.mptm"), "{err:#}");

    invoke(&out, Command::TrainTeachers, &[]).unwrap();
    let err = invoke(&out, Command::AdaptTarget, &[]).unwrap_err();
    assert!(format!("{err:#}").contains("train-source"), "{err:#}");

    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn full_pipeline_is_deterministic_across_reruns() {
    let out_a = tmpdir("det-a");
    let out_b = tmpdir("det-b");
    for out in [&out_a, &out_b] {
        invoke(out, Command::GenTasks, &[]).unwrap();
        invoke(out, Command::TrainTeachers, &[]).unwrap();
        invoke(out, Command::TrainSource, &[]).unwrap();
        invoke(out, Command::AdaptTarget, &[]).unwrap();
        invoke(out, Command::Analyze, &[]).unwrap();
        invoke(out, Command::Report, &[]).unwrap();
    }
    assert_eq!(read_manifest(&out_a), read_manifest(&out_b));
    fs::remove_dir_all(&out_a).unwrap();
    fs::remove_dir_all(&out_b).unwrap();
}

#[test]
fn different_seed_changes_artifacts() {
    let out_a = tmpdir("seed-a");
    let out_b = tmpdir("seed-b");
    invoke(&out_a, Command::GenTasks, &[]).unwrap();
    invoke(&out_a, Command::TrainTeachers, &[]).unwrap();
    invoke(&out_b, Command::GenTasks, &["seeds=1"]).unwrap();
    invoke(&out_b, Command::TrainTeachers, &["seeds=1"]).unwrap();
    assert_ne!(read_manifest(&out_a), read_manifest(&out_b));
    fs::remove_dir_all(&out_a).unwrap();
    fs::remove_dir_all(&out_b).unwrap();
}

#[test]
fn lock_file_rejects_concurrent_invocations() {
    let out = tmpdir("lock");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), b"").unwrap();
    let err = invoke(&out, Command::GenTasks, &[]).unwrap_err();
    assert!(format!("{err:#}").contains("locked"), "{err:#}");
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn seed_flag_overrides_config_seed_list() {
    let out = tmpdir("seedflag");
    run(&Cli {
        config: None,
        out: out.clone(),
        seed: Some(77),
        overrides: tiny_overrides(),
        command: Command::GenTasks,
    })
    .unwrap();
    let config = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("seeds = 77"), "{config}");
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn invalid_overrides_fail_before_any_work() {
    let out = tmpdir("badset");
    let err = invoke(&out, Command::GenTasks, &["lambda=-3"]).unwrap_err();
    assert!(format!("{err:#}").contains("lambda"), "{err:#}");
    assert!(!out.join("tasks").exists());
    let _ = fs::remove_dir_all(&out);
}

#[test]
fn mpt_seed_env_reaches_the_binary() {
    let out = tmpdir("env");
    let status = Process::new(env!("CARGO_BIN_EXE_mpt"))
        .env("MPT_SEED", "123")
        .args(["--out", out.to_str().unwrap(), "gen-tasks"])
        .args(tiny_overrides().iter().flat_map(|o| ["--set".to_string(), o.clone()]))
        .status()
        .expect("binary runs");
    assert!(status.success());
    let config = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("seeds = 123"), "{config}");
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn nonzero_exit_and_one_line_diagnostic_on_failure() {
    let out = tmpdir("diag");
    let output = Process::new(env!("CARGO_BIN_EXE_mpt"))
        .args(["--out", out.to_str().unwrap(), "adapt-target"])
        .output()
        .expect("binary runs");
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "expected one diagnostic line, got: {stderr}");
    assert!(lines[0].starts_with("error:"), "{stderr}");
    assert!(lines[0].contains("adapt-target"), "{stderr}");
    let _ = fs::remove_dir_all(&out);
}

#[test]
fn checkpoints_validate_magic_on_load() {
    let out = tmpdir("magic");
    invoke(&out, Command::GenTasks, &[]).unwrap();
    invoke(&out, Command::TrainTeachers, &[]).unwrap();
    // corrupt the model checkpoint's magic
    let model_path = out.join("model.mptm");
    let mut bytes = fs::read(&model_path).unwrap();
    bytes[0] = b'X';
    fs::write(&model_path, &bytes).unwrap();
    let err = invoke(&out, Command::TrainSource, &[]).unwrap_err();
    assert!(format!("{err:#}").contains("magic"), "{err:#}");
    fs::remove_dir_all(&out).unwrap();
}
