//! The command-line binary: exit codes, run folders and reruns.

mod common;

use common::pipeline::{folder_differences, ok, sunplug, toy_pipeline};
use sunplug::checkpoint::{adapter_checkpoint, teacher_checkpoint};
use sunplug::adapter::SunAdapter;
use sunplug::denoiser::{TeacherModel, UNetConfig};

#[test]
fn help_and_usage_errors() {
    assert_eq!(sunplug(&["--help"]).code, 0);
    assert_eq!(sunplug(&["sample", "--help"]).code, 0);
    assert_eq!(sunplug(&[]).code, 2);
    assert_eq!(sunplug(&["fly"]).code, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad_key = sunplug(&["gen-data", "--set", "data.colour=red", "--out", out]);
    assert_eq!(bad_key.code, 2, "{}", bad_key.stderr);
    assert!(bad_key.stderr.contains("data.colour"));
    assert_eq!(sunplug(&["gen-data", "--style", "plaid", "--out", out]).code, 2);
    assert_eq!(sunplug(&["train-teacher", "--out", out]).code, 2, "missing data path");
}

#[test]
fn unreadable_and_incompatible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = sunplug(&["sample", "--teacher", "/nonexistent/t.ckpt", "--out", out]);
    assert_eq!(missing.code, 3, "{}", missing.stderr);

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
    assert_eq!(sunplug(&["sample", "--teacher", garbage.to_str().unwrap(), "--out", out]).code, 3);

    let tiny = TeacherModel::new(UNetConfig::tiny(), 1);
    let compact = TeacherModel::new(UNetConfig::compact(), 1);
    let t = dir.path().join("compact.ckpt");
    let a = dir.path().join("tiny-adapter.ckpt");
    teacher_checkpoint(&compact).save(&t).unwrap();
    adapter_checkpoint(&SunAdapter::new(&tiny)).save(&a).unwrap();
    let o = sunplug(&[
        "sample",
        "--teacher",
        t.to_str().unwrap(),
        "--adapter",
        a.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(o.code, 4, "{}", o.stderr);
}

#[test]
fn sampling_writes_images_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let t = dir.path().join("t.ckpt");
    teacher_checkpoint(&TeacherModel::new(UNetConfig::tiny(), 3)).save(&t).unwrap();
    let run = ok(&["sample", "--teacher", t.to_str().unwrap(), "--count", "2", "--steps", "3", "--out", out]);
    for f in ["config.resolved", "samples.ckpt", "samples.pgm", "traces.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let traces = std::fs::read_to_string(run.join("traces.csv")).unwrap();
    // Guided teacher: two evaluations per step.
    assert!(traces.lines().skip(1).all(|l| l.split(',').nth(2) == Some("6")), "{traces}");
}

#[test]
fn every_command_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = toy_pipeline(a.path());
    let second = toy_pipeline(b.path());
    for ((cmd, x), (_, y)) in first.iter().zip(&second) {
        assert_eq!(x.file_name(), y.file_name(), "{cmd}: run folder names differ");
        let diffs = folder_differences(x, y);
        assert!(diffs.is_empty(), "{cmd}: {diffs:?}");
    }
    let names: Vec<&str> = first.iter().map(|(c, _)| *c).collect();
    assert_eq!(
        names,
        ["gen-data", "train-teacher", "finetune-teacher", "train-adapter", "sample", "eval", "bench", "ablate"]
    );
}
