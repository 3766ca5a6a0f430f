//! Drives the `sunplug` binary through every pipeline command at toy scale
//! and compares run folders.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const BIN: &str = env!("CARGO_BIN_EXE_sunplug");

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn sunplug(args: &[&str]) -> Outcome {
    sunplug_in(Path::new("."), args)
}

pub fn sunplug_in(cwd: &Path, args: &[&str]) -> Outcome {
    let out = Command::new(BIN).current_dir(cwd).args(args).output().expect("spawn sunplug");
    Outcome {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs a command that must succeed and returns its run folder.
pub fn ok(args: &[&str]) -> PathBuf {
    ok_in(Path::new("."), args)
}

/// Like [`ok`] from inside `cwd`; the returned folder is relative to it.
pub fn ok_in(cwd: &Path, args: &[&str]) -> PathBuf {
    let o = sunplug_in(cwd, args);
    assert_eq!(o.code, 0, "sunplug {args:?} failed: {}", o.stderr);
    PathBuf::from(o.stdout.trim())
}

/// Toy-scale settings shared by every command.
const TOY: &[&str] = &[
    "--threads", "1",
    "--set", "data.size=48",
    "--set", "teacher.steps=4",
    "--set", "teacher.batch=4",
    "--set", "distill.steps=3",
    "--set", "distill.batch=4",
    "--set", "distill.checkpoint_every=2",
    "--set", "sample.count=3",
    "--set", "eval.samples=4",
    "--set", "eval.ref_steps=6",
    "--set", "bench.samples=4",
    "--set", "bench.grid=2,4",
    "--set", "bench.repeats=1",
];

fn with_toy<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TOY);
    v.extend_from_slice(&["--out", "runs"]);
    v
}

/// Every pipeline command in order, run from inside `root` with relative
/// paths so that two roots resolve to identical configurations. Returns
/// `(command, absolute run folder)`.
pub fn toy_pipeline(root: &Path) -> Vec<(&'static str, PathBuf)> {
    let ok = |args: &[&str]| ok_in(root, args);
    let mut runs = Vec::new();
    let data = ok(&with_toy(&["gen-data"]));
    let data_bin = data.join("data.bin");
    let d = data_bin.to_str().unwrap();
    runs.push(("gen-data", data.clone()));
    let striped = ok(&with_toy(&["gen-data", "--style", "striped"]));
    let striped_bin = striped.join("data.bin");

    let teacher = ok(&with_toy(&["train-teacher", "--data", d]));
    let t_ck = teacher.join("teacher.ckpt");
    let t = t_ck.to_str().unwrap();
    runs.push(("train-teacher", teacher.clone()));
    let ft = ok(&with_toy(&["finetune-teacher", "--teacher", t, "--data", striped_bin.to_str().unwrap()]));
    runs.push(("finetune-teacher", ft));

    let adapter = ok(&with_toy(&["train-adapter", "--teacher", t, "--data", d]));
    let a_ck = adapter.join("adapter.ckpt");
    let a = a_ck.to_str().unwrap();
    runs.push(("train-adapter", adapter.clone()));
    let plain = ok(&with_toy(&["train-adapter", "--teacher", t, "--data", d, "--lambda", "0"]));
    let p_ck = plain.join("adapter.ckpt");

    runs.push(("sample", ok(&with_toy(&["sample", "--teacher", t, "--adapter", a, "--negative", "blur"]))));
    runs.push(("eval", ok(&with_toy(&["eval", "--mode", "all", "--teacher", t, "--adapter", a]))));
    runs.push(("bench", ok(&with_toy(&["bench", "--teacher", t, "--adapter", a]))));
    let list = format!("msc={a},plain={}", p_ck.display());
    runs.push(("ablate", ok(&with_toy(&["ablate", "--teacher", t, "--adapters", &list]))));
    runs.into_iter().map(|(c, p)| (c, root.join(p))).collect()
}

/// Drops `wall_ms` columns of a CSV file.
fn without_timing(text: &str) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else { return String::new() };
    let keep: Vec<bool> = header.split(',').map(|c| c != "wall_ms").collect();
    let filter = |line: &str| {
        line.split(',')
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(c, _)| c)
            .collect::<Vec<_>>()
            .join(",")
    };
    std::iter::once(filter(header)).chain(lines.map(filter)).collect::<Vec<_>>().join("\n")
}

/// Differences between two run folders. CSV timing columns and the output
/// root line of `config.resolved` are ignored; everything else must match
/// byte for byte.
pub fn folder_differences(a: &Path, b: &Path) -> Vec<String> {
    let names = |p: &Path| {
        let mut v: Vec<String> = fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let (na, nb) = (names(a), names(b));
    if na != nb {
        return vec![format!("file lists differ: {na:?} vs {nb:?}")];
    }
    let mut diffs = Vec::new();
    for n in na {
        let (x, y) = (fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
        let same = if n.ends_with(".csv") {
            without_timing(&String::from_utf8_lossy(&x)) == without_timing(&String::from_utf8_lossy(&y))
        } else if n == "config.resolved" {
            let strip = |v: &[u8]| {
                String::from_utf8_lossy(v)
                    .lines()
                    .filter(|l| !l.starts_with("out = "))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            strip(&x) == strip(&y)
        } else {
            x == y
        };
        if !same {
            diffs.push(n);
        }
    }
    diffs
}
