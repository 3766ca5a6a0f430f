//! Run configuration: `key = value` lines grouped under `[section]`
//! headers, merged with command-line overrides. Every key has a default and
//! a help line; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{DataConfig, Style};
use crate::denoiser::{TeacherTrainConfig, UNetConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

/// `(section.key, default, help)`.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run.seed", "1", "master seed for every random stream"),
    ("run.threads", "1", "worker threads; 1 is the reference path"),
    ("run.out", "runs", "directory that receives run folders"),
    ("data.path", "", "dataset file read by training commands"),
    ("data.size", "8000", "examples generated by gen-data"),
    ("data.style", "base", "base | inverted | striped"),
    ("data.corruption_prob", "0.3", "probability that an example gets one corruption"),
    ("data.mark_prob", "0.1", "per-mark probability"),
    ("model.preset", "tiny", "tiny | compact | full network width"),
    ("teacher.path", "", "teacher checkpoint read by later commands"),
    ("teacher.steps", "20000", "optimizer steps"),
    ("teacher.batch", "32", "batch size"),
    ("teacher.lr", "0.001", "AdamW learning rate"),
    ("teacher.weight_decay", "0.01", "AdamW weight decay"),
    ("teacher.cond_dropout", "0.1", "probability of training on the empty prompt"),
    ("teacher.phrase_dropout", "0.5", "per-phrase caption dropout for non-shape phrases"),
    ("adapter.path", "", "adapter checkpoint read by sample, eval and bench"),
    ("distill.w", "8.0", "guidance weight of the teacher target"),
    ("distill.lambda", "0.1", "weight of the multi-step consistency loss"),
    ("distill.delta", "0.25", "rollout segment length"),
    ("distill.n_max", "3", "maximum rollout segments"),
    ("distill.steps", "5000", "optimizer steps"),
    ("distill.batch", "32", "batch size"),
    ("distill.lr", "0.0001", "AdamW learning rate of the projections"),
    ("distill.weight_decay", "0.01", "AdamW weight decay"),
    ("distill.gain_lr_scale", "100", "learning-rate multiplier of the alpha/beta gains"),
    ("distill.phrase_dropout", "0.5", "per-phrase dropout of positive captions"),
    ("distill.normalize", "true", "rescale negative features to the positive row norms"),
    ("distill.checkpoint_every", "1000", "adapter snapshot interval in steps; 0 disables"),
    ("sample.steps", "4", "DDIM steps"),
    ("sample.w", "8.0", "guidance weight when sampling the teacher"),
    ("sample.count", "16", "number of samples"),
    ("sample.positive", "circle bright", "positive prompt"),
    ("sample.negative", "", "negative prompt"),
    ("eval.mode", "kd", "kd | control | all"),
    ("eval.samples", "256", "samples per cell"),
    ("eval.steps", "4", "student and baseline DDIM steps"),
    ("eval.ref_steps", "25", "DDIM steps of the guided reference"),
    ("eval.prompt_seed", "999", "seed of the held-out prompt set"),
    ("eval.phrases", "blur speckle hole", "phrases probed by the control evaluation"),
    ("bench.grid", "4,8,12", "step counts"),
    ("bench.samples", "64", "samples per cell"),
    ("bench.repeats", "3", "timing repeats; the fastest is kept"),
    ("ablate.adapters", "", "comma-separated name=path adapters to compare"),
    ("ablate.steps", "4,8", "the two step counts compared"),
];

/// Resolved key/value configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&key, v.trim()).map_err(|e| Error::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Usage(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown key {key}"))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Usage(format!("invalid value `{v}` for `{key}`")))
    }

    /// A path-valued key that must be set.
    pub fn required(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            "" => Err(Error::Usage(format!("missing required setting `{key}`"))),
            v => Ok(v),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Usage(format!("invalid list item `{s}` in `{key}`")))
            })
            .collect()
    }

    /// Canonical text; parsing it gives back an equal configuration.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in &self.values {
            let (section, name) = key.split_once('.').expect("schema keys are sectioned");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    /// Short digest of every value except `run.out`, used to name run
    /// folders.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "run.out") {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        let d = h.finalize();
        d[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("run.seed")
    }

    pub fn threads(&self) -> Result<usize> {
        let t: usize = self.parsed("run.threads")?;
        if t == 0 {
            return Err(Error::Usage("run.threads must be at least 1".into()));
        }
        Ok(t)
    }

    pub fn unet(&self) -> Result<UNetConfig> {
        match self.get("model.preset") {
            "tiny" => Ok(UNetConfig::tiny()),
            "compact" => Ok(UNetConfig::compact()),
            "full" => Ok(UNetConfig::default()),
            other => Err(Error::Usage(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        let style: Style = self.get("data.style").parse()?;
        let cfg = DataConfig {
            corruption_prob: self.parsed("data.corruption_prob")?,
            mark_prob: self.parsed("data.mark_prob")?,
            style,
            ..DataConfig::default()
        };
        for (name, p) in [("data.corruption_prob", cfg.corruption_prob), ("data.mark_prob", cfg.mark_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Usage(format!("`{name}` must lie in [0, 1]")));
            }
        }
        Ok(cfg)
    }

    pub fn teacher_train(&self) -> Result<TeacherTrainConfig> {
        let cfg = TeacherTrainConfig {
            steps: self.parsed("teacher.steps")?,
            batch: self.parsed("teacher.batch")?,
            optimizer: AdamWConfig {
                lr: self.parsed("teacher.lr")?,
                weight_decay: self.parsed("teacher.weight_decay")?,
                ..AdamWConfig::default()
            },
            cond_dropout: self.parsed("teacher.cond_dropout")?,
            phrase_dropout: self.parsed("teacher.phrase_dropout")?,
            seed: self.seed()?,
            threads: self.threads()?,
        };
        if cfg.batch == 0 || !(0.0..=1.0).contains(&cfg.cond_dropout) || !(0.0..=1.0).contains(&cfg.phrase_dropout) {
            return Err(Error::Usage("teacher batch must be positive and dropouts in [0, 1]".into()));
        }
        Ok(cfg)
    }

    pub fn distill(&self) -> Result<DistillConfig> {
        let cfg = DistillConfig {
            w: self.parsed("distill.w")?,
            lambda: self.parsed("distill.lambda")?,
            delta: self.parsed("distill.delta")?,
            n_max: self.parsed("distill.n_max")?,
            batch: self.parsed("distill.batch")?,
            steps: self.parsed("distill.steps")?,
            seed: self.seed()?,
            optimizer: AdamWConfig {
                lr: self.parsed("distill.lr")?,
                weight_decay: self.parsed("distill.weight_decay")?,
                ..AdamWConfig::default()
            },
            gain_lr_scale: self.parsed("distill.gain_lr_scale")?,
            phrase_dropout: self.parsed("distill.phrase_dropout")?,
            normalize: self.parsed("distill.normalize")?,
            threads: self.threads()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--help` text listing every key with its default.
    pub fn help() -> String {
        let mut out = String::from("configuration keys (file sections or --set section.key=value):\n");
        for (k, v, h) in SCHEMA {
            let _ = writeln!(out, "  {k:<26} {h} [default: {v:?}]");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_comments_and_overrides() {
        let text = "# experiment\n[distill]\nlambda = 0.0  # ablation arm\nsteps=10\n\n[run]\nseed = 7\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.get("distill.lambda"), "0.0");
        assert_eq!(cfg.seed().unwrap(), 7);
        cfg.apply(&["distill.steps=12".into()]).unwrap();
        let d = cfg.distill().unwrap();
        assert_eq!(d.steps, 12);
        assert_eq!(d.lambda, 0.0);
        assert_eq!(d.w, 8.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(matches!(RunConfig::parse("[distill]\nlamda = 1"), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Usage(_))));
        let mut cfg = RunConfig::default();
        assert!(cfg.apply(&["nope".into()]).is_err());
        cfg.set("distill.delta", "abc").unwrap();
        assert!(matches!(cfg.distill(), Err(Error::Usage(_))));
        cfg.set("distill.delta", "0.5").unwrap();
        assert!(matches!(cfg.distill(), Err(Error::Usage(_))), "3 segments of 0.5 exceed 1");
        assert!(matches!(cfg.required("teacher.path"), Err(Error::Usage(_))));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply(&["sample.negative=blur hole".into(), "run.seed=3".into()]).unwrap();
        let back = RunConfig::parse(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(RunConfig::default().digest(), cfg.digest());
    }

    #[test]
    fn defaults_build_every_component() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.distill().unwrap().steps, 5000);
        assert_eq!(cfg.teacher_train().unwrap().optimizer.lr, 1e-3);
        assert_eq!(cfg.unet().unwrap(), UNetConfig::tiny());
        assert_eq!(cfg.list::<usize>("bench.grid").unwrap(), vec![4, 8, 12]);
        assert!(cfg.data_config().is_ok());
        assert!(RunConfig::help().contains("distill.lambda"));
    }
}
