//! Command-line pipeline: data generation, teacher training and
//! fine-tuning, adapter training, sampling, evaluation, benchmarking and
//! ablation. Each command writes into `<out>/<command>-<config digest>/`
//! together with the resolved configuration.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::adapter::{plug_into, SunAdapter};
use crate::checkpoint::{
    adapter_checkpoint, adapter_from_checkpoint, teacher_checkpoint, teacher_from_checkpoint, tensors_checkpoint,
    Checkpoint,
};
use crate::config::RunConfig;
use crate::data::{make_dataset, write_pgm_grid, Dataset};
use crate::denoiser::{train_teacher, TeacherModel};
use crate::distill::{train_adapter, LOSS_CSV_HEADER};
use crate::error::{Error, Result};
use crate::eval::{
    heldout_requests, kd_consistency, msc_ablation, negative_control_eval, reference_set, sliced_wasserstein,
    ABLATION_CSV_HEADER, DEFAULT_PROJECTIONS, EVAL_CSV_HEADER,
};
use crate::prompt::{Prompt, Vocabulary};
use crate::sampler::{bench, images, sample, SampleOptions, SampleRequest, Sampler, BENCH_CSV_HEADER};
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "sunplug", version, about = "Negative-prompt adapter distillation pipeline")]
pub struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`[section]` headers and `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set distill.lambda=0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Parent directory of run folders.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Return an existing completed run folder instead of recomputing it.
    #[arg(long, global = true)]
    reuse: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        corruption_prob: Option<f64>,
    },
    /// Train a teacher from scratch.
    TrainTeacher {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Continue teacher training on another dataset.
    FinetuneTeacher {
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Distill a negative-prompt adapter from a frozen teacher.
    TrainAdapter {
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        normalize: Option<bool>,
    },
    /// Sample the guided teacher, or the student when an adapter is given.
    Sample {
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        positive: Option<String>,
        #[arg(long)]
        negative: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        w: Option<f64>,
    },
    /// Distance to the many-step reference and negative-prompt control.
    Eval {
        #[arg(long)]
        mode: Option<String>,
        /// Adapter checkpoint.
        #[arg(long, visible_alias = "student")]
        adapter: Option<String>,
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ref_steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Wall-clock and evaluation counts over a step grid.
    Bench {
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Cross-step consistency of several adapters on one teacher.
    Ablate {
        #[arg(long)]
        teacher: Option<String>,
        /// Comma-separated `name=path` list.
        #[arg(long)]
        adapters: Option<String>,
        #[arg(long)]
        steps: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::FinetuneTeacher { .. } => "finetune-teacher",
            Command::TrainAdapter { .. } => "train-adapter",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Ablate { .. } => "ablate",
        }
    }

    /// Flag values as configuration overrides.
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(T::to_string)
        }
        match self {
            Command::GenData {
                size,
                style,
                corruption_prob,
            } => vec![
                ("data.size", s(size)),
                ("data.style", s(style)),
                ("data.corruption_prob", s(corruption_prob)),
            ],
            Command::TrainTeacher {
                data,
                steps,
                batch,
                lr,
                preset,
            } => vec![
                ("data.path", s(data)),
                ("teacher.steps", s(steps)),
                ("teacher.batch", s(batch)),
                ("teacher.lr", s(lr)),
                ("model.preset", s(preset)),
            ],
            Command::FinetuneTeacher { teacher, data, steps, lr } => vec![
                ("teacher.path", s(teacher)),
                ("data.path", s(data)),
                ("teacher.steps", s(steps)),
                ("teacher.lr", s(lr)),
            ],
            Command::TrainAdapter {
                teacher,
                data,
                lambda,
                delta,
                w,
                steps,
                batch,
                lr,
                normalize,
            } => vec![
                ("teacher.path", s(teacher)),
                ("data.path", s(data)),
                ("distill.lambda", s(lambda)),
                ("distill.delta", s(delta)),
                ("distill.w", s(w)),
                ("distill.steps", s(steps)),
                ("distill.batch", s(batch)),
                ("distill.lr", s(lr)),
                ("distill.normalize", s(normalize)),
            ],
            Command::Sample {
                teacher,
                adapter,
                positive,
                negative,
                steps,
                count,
                w,
            } => vec![
                ("teacher.path", s(teacher)),
                ("adapter.path", s(adapter)),
                ("sample.positive", s(positive)),
                ("sample.negative", s(negative)),
                ("sample.steps", s(steps)),
                ("sample.count", s(count)),
                ("sample.w", s(w)),
            ],
            Command::Eval {
                mode,
                adapter,
                teacher,
                steps,
                ref_steps,
                samples,
            } => vec![
                ("eval.mode", s(mode)),
                ("adapter.path", s(adapter)),
                ("teacher.path", s(teacher)),
                ("eval.steps", s(steps)),
                ("eval.ref_steps", s(ref_steps)),
                ("eval.samples", s(samples)),
            ],
            Command::Bench {
                teacher,
                adapter,
                grid,
                samples,
            } => vec![
                ("teacher.path", s(teacher)),
                ("adapter.path", s(adapter)),
                ("bench.grid", s(grid)),
                ("bench.samples", s(samples)),
            ],
            Command::Ablate {
                teacher,
                adapters,
                steps,
            } => vec![
                ("teacher.path", s(teacher)),
                ("ablate.adapters", s(adapters)),
                ("ablate.steps", s(steps)),
            ],
        }
    }
}

/// Empty marker written last into every finished run folder.
pub const COMPLETE: &str = "complete";

/// Process exit code for an error: 2 usage, 3 input/output, 4 incompatible
/// checkpoint, 5 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Prompt(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Incompatible(_) => 4,
        Error::NonFinite { .. }
        | Error::Diverged { .. }
        | Error::Domain(_)
        | Error::Shape { .. }
        | Error::NotScalar(_)
        | Error::TapeConsumed
        | Error::MissingGrad(_) => 5,
    }
}

/// Parses arguments, runs the command and returns the exit code, printing
/// a one-line diagnostic on failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let command = Cli::command().after_long_help(RunConfig::help());
    let cli = match command
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolves the configuration of a parsed command line.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.common.set)?;
    let common = [
        ("run.seed", cli.common.seed.map(|v| v.to_string())),
        ("run.threads", cli.common.threads.map(|v| v.to_string())),
        ("run.out", cli.common.out.clone()),
    ];
    for (k, v) in common.into_iter().chain(cli.command.overrides()) {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    let cfg = resolve(&cli)?;
    let name = cli.command.name();
    let dir = Path::new(cfg.get("run.out")).join(format!("{name}-{}", cfg.digest()));
    if cli.common.reuse && dir.join(COMPLETE).exists() {
        return Ok(dir);
    }
    let _ = fs::remove_file(dir.join(COMPLETE));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.resolved"), cfg.snapshot())?;
    match name {
        "gen-data" => gen_data(&cfg, &dir)?,
        "train-teacher" => teacher_run(&cfg, &dir, false)?,
        "finetune-teacher" => teacher_run(&cfg, &dir, true)?,
        "train-adapter" => adapter_run(&cfg, &dir)?,
        "sample" => sample_run(&cfg, &dir)?,
        "eval" => eval_run(&cfg, &dir)?,
        "bench" => bench_run(&cfg, &dir)?,
        "ablate" => ablate_run(&cfg, &dir)?,
        _ => unreachable!("every subcommand is dispatched"),
    }
    fs::write(dir.join(COMPLETE), "")?;
    Ok(dir)
}

fn csv_writer(path: &Path, header: &str) -> Result<BufWriter<fs::File>> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn load_teacher(cfg: &RunConfig) -> Result<TeacherModel> {
    teacher_from_checkpoint(&Checkpoint::load(cfg.required("teacher.path")?)?)
}

fn load_adapter(path: &str) -> Result<SunAdapter> {
    adapter_from_checkpoint(&Checkpoint::load(path)?)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(Path::new(cfg.required("data.path")?))
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let size: usize = cfg.parsed("data.size")?;
    let data = make_dataset(size, cfg.seed()?, &cfg.data_config()?)?;
    data.save(&dir.join("data.bin"))?;
    let corrupted = data
        .examples
        .iter()
        .filter(|e| e.attributes.corruptions.iter().any(|&c| c))
        .count();
    let mean: f64 = data.examples.iter().flat_map(|e| &e.pixels).map(|&v| v as f64).sum::<f64>()
        / (size.max(1) * crate::data::PIXELS) as f64;
    let manifest = format!(
        "examples = {size}\nstyle = {}\nseed = {}\ncorrupted_fraction = {:.4}\nmean_pixel = {mean:.6}\n",
        cfg.get("data.style"),
        cfg.seed()?,
        corrupted as f64 / size.max(1) as f64
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    let preview: Vec<Vec<f32>> = data.examples.iter().take(64).map(|e| e.pixels.clone()).collect();
    if !preview.is_empty() {
        write_pgm_grid(&dir.join("preview.pgm"), &preview, 8, 4)?;
    }
    Ok(())
}

fn teacher_run(cfg: &RunConfig, dir: &Path, finetune: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let mut model = if finetune {
        load_teacher(cfg)?
    } else {
        TeacherModel::new(cfg.unet()?, cfg.seed()?)
    };
    let tc = cfg.teacher_train()?;
    let mut log = csv_writer(&dir.join("loss.csv"), "step,loss,wall_ms")?;
    let start = std::time::Instant::now();
    let mut io = Ok(());
    train_teacher(&mut model, &data, &tc, |step, loss| {
        if io.is_ok() {
            io = writeln!(log, "{step},{loss:.9e},{}", start.elapsed().as_millis());
        }
    })?;
    io?;
    log.flush()?;
    model.freeze();
    teacher_checkpoint(&model).save(dir.join("teacher.ckpt"))
}

fn adapter_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load_teacher(cfg)?;
    let data = load_data(cfg)?;
    let dc = cfg.distill()?;
    let every: usize = cfg.parsed("distill.checkpoint_every")?;
    let before = teacher.store.checksum();
    let mut log = csv_writer(&dir.join("loss.csv"), LOSS_CSV_HEADER)?;
    let (adapter, _) = train_adapter(&teacher, &data, &dc, |row, adapter| {
        writeln!(log, "{}", row.csv_row())?;
        if every > 0 && (row.step + 1) % every == 0 {
            adapter_checkpoint(adapter).save(dir.join(format!("adapter-step{}.ckpt", row.step + 1)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let after = teacher.store.checksum();
    let hex = |d: [u8; 32]| d.iter().map(|b| format!("{b:02x}")).collect::<String>();
    fs::write(
        dir.join("freeze.txt"),
        format!("teacher_before = {}\nteacher_after = {}\n", hex(before), hex(after)),
    )?;
    adapter_checkpoint(&adapter).save(dir.join("adapter.ckpt"))
}

fn sample_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load_teacher(cfg)?;
    let adapter = match cfg.get("adapter.path") {
        "" => None,
        p => Some(load_adapter(p)?),
    };
    let positive = Prompt::parse(cfg.get("sample.positive"))?;
    let negative = Prompt::parse(cfg.get("sample.negative"))?;
    let count: usize = cfg.parsed("sample.count")?;
    let seed = cfg.seed()?;
    let requests: Vec<SampleRequest> = (0..count)
        .map(|i| SampleRequest {
            positive: positive.clone(),
            negative: negative.clone(),
            seed: seed + i as u64,
        })
        .collect();
    let opts = SampleOptions {
        threads: cfg.threads()?,
        ..SampleOptions::new(cfg.parsed("sample.steps")?)
    };
    let traces = match &adapter {
        Some(a) => sample(Sampler::Student(plug_into(a, &teacher)?), &requests, opts)?,
        None => sample(
            Sampler::TeacherCfg {
                teacher: &teacher,
                w: cfg.parsed("sample.w")?,
            },
            &requests,
            opts,
        )?,
    };
    let stack = |f: &dyn Fn(usize) -> Vec<f32>| -> Result<Tensor<f32>> {
        Tensor::new(&[count, 1, 16, 16], (0..count).flat_map(f).collect())
    };
    let dump = tensors_checkpoint(
        vec![
            ("steps".into(), cfg.get("sample.steps").into()),
            ("nfe_per_sample".into(), traces.first().map_or(0, |t| t.nfe).to_string()),
            ("seed".into(), seed.to_string()),
        ],
        vec![
            ("z_init".into(), stack(&|i| traces[i].z_init.data().to_vec())?),
            ("z0".into(), stack(&|i| traces[i].z0.data().to_vec())?),
        ],
    );
    dump.save(dir.join("samples.ckpt"))?;
    if count > 0 {
        write_pgm_grid(&dir.join("samples.pgm"), &images(&traces), 8, 4)?;
    }
    let mut w = csv_writer(&dir.join("traces.csv"), "index,seed,nfe,wall_ms")?;
    for (i, t) in traces.iter().enumerate() {
        writeln!(w, "{i},{},{},{}", t.seed, t.nfe, t.wall_ms)?;
    }
    w.flush()?;
    Ok(())
}

fn kd_requests(cfg: &RunConfig, count: usize) -> Result<Vec<SampleRequest>> {
    heldout_requests(count, cfg.parsed("eval.prompt_seed")?)
}

fn eval_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load_teacher(cfg)?;
    let adapter = load_adapter(cfg.required("adapter.path")?)?;
    let student = plug_into(&adapter, &teacher)?;
    let mode = cfg.get("eval.mode");
    if !matches!(mode, "kd" | "control" | "all") {
        return Err(Error::Usage(format!("unknown eval mode `{mode}` (kd|control|all)")));
    }
    let samples: usize = cfg.parsed("eval.samples")?;
    let steps: usize = cfg.parsed("eval.steps")?;
    let threads = cfg.threads()?;
    let w: f64 = cfg.parsed("distill.w")?;
    let guided = Sampler::TeacherCfg { teacher: &teacher, w };
    if mode != "control" {
        let ref_steps: usize = cfg.parsed("eval.ref_steps")?;
        let reqs = kd_requests(cfg, samples)?;
        let reference = reference_set(&teacher, &reqs, ref_steps, w, threads)?;
        let mut out = csv_writer(&dir.join("kd.csv"), EVAL_CSV_HEADER)?;
        for (name, m) in [("student", Sampler::Student(student)), ("teacher-cfg", guided)] {
            writeln!(out, "{}", kd_consistency(name, m, &reqs, steps, &reference, threads)?.csv_row())?;
        }
        writeln!(out, "{}", kd_consistency("reference", guided, &reqs, ref_steps, &reference, threads)?.csv_row())?;
        out.flush()?;
    }
    if mode != "kd" {
        let phrases: Vec<usize> = cfg
            .get("eval.phrases")
            .split_whitespace()
            .map(|p| Vocabulary::index(p).ok_or_else(|| Error::Usage(format!("unknown phrase `{p}`"))))
            .collect::<Result<_>>()?;
        let held_out = make_dataset(256, cfg.parsed("eval.prompt_seed")?, &crate::data::DataConfig::default())?;
        let seed = cfg.seed()?;
        for (name, m) in [("student", Sampler::Student(student)), ("teacher-cfg", guided)] {
            let table = negative_control_eval(m, &held_out, &phrases, samples, steps, seed, threads)?;
            fs::write(dir.join(format!("control-{name}.csv")), table.csv())?;
        }
    }
    Ok(())
}

fn bench_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load_teacher(cfg)?;
    let adapter = load_adapter(cfg.required("adapter.path")?)?;
    let student = plug_into(&adapter, &teacher)?;
    let w: f64 = cfg.parsed("distill.w")?;
    let grid: Vec<usize> = cfg.list("bench.grid")?;
    let samples: usize = cfg.parsed("bench.samples")?;
    let reqs = kd_requests(cfg, samples)?;
    let models = vec![
        ("teacher-cfg".to_string(), Sampler::TeacherCfg { teacher: &teacher, w }),
        ("student".to_string(), Sampler::Student(student)),
    ];
    let mut rows = bench(&models, &reqs, &grid, 64, cfg.parsed("bench.repeats")?)?;
    let reference = images(&reference_set(&teacher, &reqs, cfg.parsed("eval.ref_steps")?, w, cfg.threads()?)?);
    for row in &mut rows {
        let m = models.iter().find(|(n, _)| *n == row.model).expect("row of a listed model").1;
        let traces = sample(m, &reqs, SampleOptions::new(row.steps))?;
        row.distance = Some(sliced_wasserstein(&images(&traces), &reference, DEFAULT_PROJECTIONS, 0)?);
    }
    let mut out = csv_writer(&dir.join("bench.csv"), BENCH_CSV_HEADER)?;
    for r in &rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

fn ablate_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = load_teacher(cfg)?;
    let specs: Vec<(String, String)> = cfg
        .required("ablate.adapters")?
        .split(',')
        .map(|s| {
            s.split_once('=')
                .map(|(n, p)| (n.trim().to_string(), p.trim().to_string()))
                .ok_or_else(|| Error::Usage(format!("adapter spec `{s}` is not name=path")))
        })
        .collect::<Result<_>>()?;
    let adapters: Vec<(String, SunAdapter)> = specs
        .into_iter()
        .map(|(n, p)| Ok((n, load_adapter(&p)?)))
        .collect::<Result<_>>()?;
    let models: Vec<(String, Sampler)> = adapters
        .iter()
        .map(|(n, a)| Ok((n.clone(), Sampler::Student(plug_into(a, &teacher)?))))
        .collect::<Result<_>>()?;
    let steps: Vec<usize> = cfg.list("ablate.steps")?;
    let [a, b] = steps[..] else {
        return Err(Error::Usage("ablate.steps needs exactly two step counts".into()));
    };
    let reqs = kd_requests(cfg, cfg.parsed("eval.samples")?)?;
    let rows = msc_ablation(&models, &reqs, a, b, cfg.threads()?)?;
    let mut out = csv_writer(&dir.join("ablation.csv"), ABLATION_CSV_HEADER)?;
    for r in &rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()?;
    Ok(())
}
