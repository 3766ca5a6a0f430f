// The command-line pipeline driven in-process: data, teacher, adapter and
// sampling at toy scale, each in its own run folder.

use sunplug::cli::main_with_args;
use sunplug::config::RunConfig;
use sunplug::{Error, Result};

fn with<'a>(args: &[&'a str], common: &[&'a str]) -> Vec<&'a str> {
    [args, common].concat()
}

fn sunplug(args: &[&str]) -> Result<()> {
    let code = main_with_args(std::iter::once("sunplug").chain(args.iter().copied()));
    if code == 0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("sunplug {args:?} exited with {code}")))
    }
}

pub fn run_example() -> Result<()> {
    let mut cfg = RunConfig::parse("[teacher]\nsteps = 5\nbatch = 4\n\n[distill]\nsteps = 3\nbatch = 4\n")?;
    cfg.apply(&["data.size=32".to_string()])?;
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("toy.conf");
    std::fs::write(&config, cfg.snapshot())?;
    println!("run folder digest of this configuration: {}", cfg.digest());

    let root = dir.path().join("runs");
    let root = root.to_str().expect("utf-8 temp path");
    let common = ["--config", config.to_str().expect("utf-8 temp path"), "--out", root];

    sunplug(&with(&["gen-data"], &common))?;
    let folder = |prefix: &str| -> Result<String> {
        let entry = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .find(|e| e.file_name().to_string_lossy().starts_with(prefix))
            .ok_or_else(|| Error::Usage(format!("no {prefix} run")))?;
        Ok(entry.path().to_string_lossy().into_owned())
    };
    let data = format!("{}/data.bin", folder("gen-data")?);
    sunplug(&with(&["train-teacher", "--data", &data], &common))?;
    let teacher = format!("{}/teacher.ckpt", folder("train-teacher")?);
    sunplug(&with(&["train-adapter", "--teacher", &teacher, "--data", &data], &common))?;
    let adapter = format!("{}/adapter.ckpt", folder("train-adapter")?);
    sunplug(&with(&["sample", "--teacher", &teacher, "--adapter", &adapter, "--negative", "blur", "--count", "4"], &common))?;

    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let mut files: Vec<String> = std::fs::read_dir(entry.path())?
            .map(|f| f.map(|f| f.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()?;
        files.sort();
        println!("{}: {}", entry.file_name().to_string_lossy(), files.join(" "));
    }
    // Usage errors map to exit code 2.
    assert_eq!(main_with_args(["sunplug", "gen-data", "--set", "data.nope=1"]), 2);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
