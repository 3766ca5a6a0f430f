//! Deterministic DDIM sampling for the guided teacher (two evaluations per
//! step) and the adapted student (one), with evaluation counting and
//! timing.

use std::time::Instant;

use crate::adapter::StudentModel;
use crate::data::SIDE;
use crate::denoiser::TeacherModel;
use crate::error::{Error, Result};
use crate::prompt::Prompt;
use crate::rng::{normal_tensor, stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// What to sample and from which noise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRequest {
    pub positive: Prompt,
    pub negative: Prompt,
    pub seed: u64,
}

/// Record of one sampling run.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub seed: u64,
    pub z_init: Tensor<f32>,
    /// The `steps + 1` grid times.
    pub times: Vec<f64>,
    /// Latents after each step; empty unless requested.
    pub latents: Vec<Tensor<f32>>,
    /// Clean estimate at the floor, `[1, 1, 16, 16]`.
    pub z0: Tensor<f32>,
    pub nfe: u64,
    /// Wall time of the sub-batch this sample was generated in.
    pub wall_ms: u64,
}

/// Starting noise for `seed`, shared by every model.
pub fn initial_noise(seed: u64) -> Tensor<f32> {
    normal_tensor(&mut stream(seed, "sample", 0), &[1, 1, SIDE, SIDE])
}

/// A noise predictor usable for sampling.
#[derive(Clone, Copy, Debug)]
pub enum Sampler<'a> {
    /// Teacher with guidance `w eps(pos) + (1 - w) eps(neg)`.
    TeacherCfg { teacher: &'a TeacherModel, w: f64 },
    Student(StudentModel<'a>),
}

impl Sampler<'_> {
    /// Network evaluations per sample and step.
    pub fn nfe_per_step(&self) -> u64 {
        match self {
            Sampler::TeacherCfg { .. } => 2,
            Sampler::Student(_) => 1,
        }
    }

    fn host(&self) -> &TeacherModel {
        match self {
            Sampler::TeacherCfg { teacher, .. } => teacher,
            Sampler::Student(s) => s.host,
        }
    }

    fn eps(&self, z: &Tensor<f32>, ts: &[f64], positive: &[Prompt], negative: &[Prompt]) -> Result<Tensor<f32>> {
        match *self {
            Sampler::TeacherCfg { teacher, w } => teacher.predict_cfg(z, ts, positive, negative, w),
            Sampler::Student(s) => s.predict(z, ts, positive, negative),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub steps: usize,
    /// Samples evaluated together in one forward.
    pub batch: usize,
    pub keep_latents: bool,
    pub threads: usize,
}

impl SampleOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            batch: 64,
            keep_latents: false,
            threads: 1,
        }
    }
}

/// Samples every request. Requests are split into contiguous per-thread
/// ranges and each range into sub-batches; results come back in request
/// order. The evaluation counter of the host model is checked against
/// `steps * nfe_per_step` per sample.
pub fn sample(sampler: Sampler, requests: &[SampleRequest], opts: SampleOptions) -> Result<Vec<SampleTrace>> {
    if opts.steps == 0 {
        return Err(Error::Usage("sampling needs at least one step".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Usage("sampling batch must be positive".into()));
    }
    let host = sampler.host();
    let before = host.nfe();
    let threads = opts.threads.clamp(1, requests.len().max(1));
    let per = requests.len().div_ceil(threads);
    let parts: Vec<&[SampleRequest]> = requests.chunks(per.max(1)).collect();
    let run = |part: &[SampleRequest]| -> Result<Vec<SampleTrace>> {
        let mut out = Vec::with_capacity(part.len());
        for chunk in part.chunks(opts.batch) {
            out.extend(sample_batch(sampler, chunk, opts)?);
        }
        Ok(out)
    };
    let results: Vec<Result<Vec<SampleTrace>>> = if parts.len() <= 1 {
        parts.into_iter().map(run).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = parts.into_iter().map(|p| s.spawn(move || run(p))).collect();
            handles.into_iter().map(|h| h.join().expect("sampler worker panicked")).collect()
        })
    };
    let mut traces = Vec::with_capacity(requests.len());
    for r in results {
        traces.extend(r?);
    }
    let used = host.nfe() - before;
    let expected = requests.len() as u64 * opts.steps as u64 * sampler.nfe_per_step();
    if used != expected {
        return Err(Error::Domain(format!(
            "evaluation count {used} differs from the expected {expected}; was the model used concurrently?"
        )));
    }
    Ok(traces)
}

fn sample_batch(sampler: Sampler, reqs: &[SampleRequest], opts: SampleOptions) -> Result<Vec<SampleTrace>> {
    let start = Instant::now();
    let schedule = NoiseSchedule::default();
    let times = schedule.sampling_grid(opts.steps);
    let b = reqs.len();
    let inits: Vec<Tensor<f32>> = reqs.iter().map(|r| initial_noise(r.seed)).collect();
    let mut z = Tensor::stack(&inits)?.reshape(&[b, 1, SIDE, SIDE])?;
    let positive: Vec<Prompt> = reqs.iter().map(|r| r.positive.clone()).collect();
    let negative: Vec<Prompt> = reqs.iter().map(|r| r.negative.clone()).collect();
    let mut latents: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); b];
    let mut last_eps = None;
    for pair in times.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let eps = sampler.eps(&z, &vec![from; b], &positive, &negative)?;
        z = schedule.ddim_step(&z, &eps, from, to)?;
        if opts.keep_latents {
            for (i, l) in latents.iter_mut().enumerate() {
                l.push(item(&z, i)?);
            }
        }
        last_eps = Some(eps);
    }
    let floor = *times.last().expect("grid is nonempty");
    let x0 = schedule.predict_x0(&z, &last_eps.expect("at least one step"), floor)?;
    let wall_ms = start.elapsed().as_millis() as u64;
    let nfe = opts.steps as u64 * sampler.nfe_per_step();
    reqs.iter()
        .zip(inits)
        .zip(latents)
        .enumerate()
        .map(|(i, ((r, z_init), latents))| {
            Ok(SampleTrace {
                seed: r.seed,
                z_init,
                times: times.clone(),
                latents,
                z0: item(&x0, i)?,
                nfe,
                wall_ms,
            })
        })
        .collect()
}

fn item(x: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    Tensor::new(&[1, 1, SIDE, SIDE], x.outer(i).to_vec())
}

pub fn sample_teacher_cfg(
    teacher: &TeacherModel,
    requests: &[SampleRequest],
    w: f64,
    opts: SampleOptions,
) -> Result<Vec<SampleTrace>> {
    sample(Sampler::TeacherCfg { teacher, w }, requests, opts)
}

pub fn sample_student(student: StudentModel, requests: &[SampleRequest], opts: SampleOptions) -> Result<Vec<SampleTrace>> {
    sample(Sampler::Student(student), requests, opts)
}

/// Final images clamped to the pixel range.
pub fn images(traces: &[SampleTrace]) -> Vec<Vec<f32>> {
    traces
        .iter()
        .map(|t| t.z0.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())
        .collect()
}

/// One benchmark measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub steps: usize,
    /// Evaluations per sample.
    pub nfe: u64,
    /// Mean wall time per sample.
    pub wall_ms: f64,
    /// Filled in by the evaluation code when a reference set exists.
    pub distance: Option<f64>,
}

pub const BENCH_CSV_HEADER: &str = "model,steps,nfe,wall_ms,distance";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        let d = self.distance.map(|d| format!("{d:.6}")).unwrap_or_default();
        format!("{},{},{},{:.4},{}", self.model, self.steps, self.nfe, self.wall_ms, d)
    }
}

/// Times every model at every step count on the same requests. Each cell
/// runs single-threaded; the best of `repeats` timings is kept.
pub fn bench(
    models: &[(String, Sampler)],
    requests: &[SampleRequest],
    grid: &[usize],
    batch: usize,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if models.is_empty() || requests.is_empty() || grid.is_empty() {
        return Err(Error::Usage("bench needs at least one model, request and step count".into()));
    }
    let mut rows = Vec::with_capacity(models.len() * grid.len());
    for (name, sampler) in models {
        for &steps in grid {
            let opts = SampleOptions {
                batch,
                ..SampleOptions::new(steps)
            };
            let mut best = f64::INFINITY;
            let mut nfe = 0;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let traces = sample(*sampler, requests, opts)?;
                best = best.min(start.elapsed().as_secs_f64() * 1e3);
                nfe = traces[0].nfe;
            }
            rows.push(BenchRow {
                model: name.clone(),
                steps,
                nfe,
                wall_ms: best / requests.len() as f64,
                distance: None,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{plug_into, SunAdapter};
    use crate::denoiser::UNetConfig;

    fn teacher() -> TeacherModel {
        let mut t = TeacherModel::new(UNetConfig::tiny(), 21);
        let id = t.store.find("out.conv.weight").unwrap();
        let shape = t.store.get(id).shape().to_vec();
        *t.store.get_mut(id) = normal_tensor(&mut stream(1, "t", 0), &shape).map(|v| 0.05 * v);
        t.freeze();
        t
    }

    fn requests(n: usize) -> Vec<SampleRequest> {
        (0..n)
            .map(|i| SampleRequest {
                positive: Prompt::parse(if i % 2 == 0 { "circle bright" } else { "square" }).unwrap(),
                negative: Prompt::parse(if i % 3 == 0 { "blur" } else { "" }).unwrap(),
                seed: 100 + i as u64,
            })
            .collect()
    }

    #[test]
    fn evaluation_counts_per_sample() {
        let t = teacher();
        let a = SunAdapter::new(&t);
        let s = plug_into(&a, &t).unwrap();
        let reqs = requests(3);
        let tr = sample_teacher_cfg(&t, &reqs, 8.0, SampleOptions::new(25)).unwrap();
        assert!(tr.iter().all(|x| x.nfe == 50));
        assert_eq!(t.nfe(), 150);
        t.reset_nfe();
        let st = sample_student(s, &reqs, SampleOptions::new(4)).unwrap();
        assert!(st.iter().all(|x| x.nfe == 4));
        assert_eq!(t.nfe(), 12);
    }

    #[test]
    fn sampling_is_reproducible_and_batch_independent() {
        let t = teacher();
        let reqs = requests(5);
        let opts = SampleOptions {
            keep_latents: true,
            ..SampleOptions::new(6)
        };
        let a = sample_teacher_cfg(&t, &reqs, 8.0, opts).unwrap();
        let b = sample_teacher_cfg(&t, &reqs, 8.0, opts).unwrap();
        let c = sample_teacher_cfg(&t, &reqs, 8.0, SampleOptions { batch: 2, threads: 3, ..opts }).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            assert_eq!(x.z0.data(), y.z0.data());
            assert_eq!(x.z0.data(), z.z0.data());
            assert_eq!(x.latents.len(), 6);
            assert_eq!(x.latents[5].data(), z.latents[5].data());
        }
    }

    #[test]
    fn shared_noise_and_grid() {
        let t = teacher();
        let reqs = requests(2);
        let a = sample_teacher_cfg(&t, &reqs, 1.0, SampleOptions::new(3)).unwrap();
        assert_eq!(a[0].z_init.data(), initial_noise(100).data());
        assert_eq!(a[0].times.len(), 4);
        assert_eq!(a[0].times[0], 1.0);
        assert_eq!(*a[0].times.last().unwrap(), NoiseSchedule::default().floor);
        assert_ne!(a[0].z0.data(), a[1].z0.data());
    }

    #[test]
    fn zero_steps_and_empty_bench_are_rejected() {
        let t = teacher();
        assert!(sample_teacher_cfg(&t, &requests(1), 8.0, SampleOptions::new(0)).is_err());
        assert!(bench(&[], &requests(1), &[4], 8, 1).is_err());
    }

    #[test]
    fn bench_has_one_row_per_cell() {
        let t = teacher();
        let a = SunAdapter::new(&t);
        let s = plug_into(&a, &t).unwrap();
        let models = vec![
            ("teacher".to_string(), Sampler::TeacherCfg { teacher: &t, w: 8.0 }),
            ("student".to_string(), Sampler::Student(s)),
        ];
        let rows = bench(&models, &requests(2), &[1, 2, 3], 8, 1).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[2].nfe, 6);
        assert_eq!(rows[5].nfe, 3);
        assert!(rows[0].csv_row().starts_with("teacher,1,2,"));
    }
}
