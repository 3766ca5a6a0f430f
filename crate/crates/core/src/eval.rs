//! Sample-set metrics: sliced Wasserstein distance, paired distance to a
//! many-step reference, attribute agreement, negative-prompt control and
//! cross-step consistency.

use rand_distr::{Distribution, StandardNormal};

use crate::data::{attribute_oracle, make_dataset, AttributeReport, DataConfig, Dataset};
use crate::denoiser::TeacherModel;
use crate::error::{Error, Result};
use crate::prompt::{sample_negative_prompt, Group, Prompt, Vocabulary};
use crate::rng::stream;
use crate::sampler::{images, sample, sample_teacher_cfg, SampleOptions, SampleRequest, SampleTrace, Sampler};

pub const DEFAULT_PROJECTIONS: usize = 64;

/// Mean over random unit directions of the 1-D Wasserstein-1 distance
/// between the projected sets. Both sets need the same size.
pub fn sliced_wasserstein(a: &[Vec<f32>], b: &[Vec<f32>], projections: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Usage(format!(
            "sliced Wasserstein needs equal nonempty sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != dim) {
        return Err(Error::Usage("samples differ in dimension".into()));
    }
    let mut rng = stream(seed, "sliced-wasserstein", 0);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |set: &[Vec<f32>]| {
            let mut p: Vec<f64> = set
                .iter()
                .map(|x| x.iter().zip(&dir).map(|(&v, d)| v as f64 * d).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (project(a), project(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / pa.len() as f64;
    }
    Ok(total / projections as f64)
}

/// Fails unless the two runs started from the same seeds and noise.
pub fn check_pairing(a: &[SampleTrace], b: &[SampleTrace]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("paired sets differ in size: {} vs {}", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.seed != y.seed || x.z_init.data() != y.z_init.data() {
            return Err(Error::Usage(format!("sample {i} is not paired (seeds {} and {})", x.seed, y.seed)));
        }
    }
    Ok(())
}

/// Mean per-sample squared error between paired final images.
pub fn paired_mse(a: &[SampleTrace], b: &[SampleTrace]) -> Result<f64> {
    check_pairing(a, b)?;
    let (ia, ib) = (images(a), images(b));
    let sum: f64 = ia
        .iter()
        .zip(&ib)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / x.len() as f64)
        .sum();
    Ok(sum / a.len() as f64)
}

/// Agreement of one oracle report with the positive prompt: recall over
/// the prompt's phrases and precision over detections in the groups the
/// prompt names.
pub fn prompt_agreement(report: &AttributeReport, prompt: &Prompt) -> (f64, f64) {
    if prompt.is_empty() {
        return (1.0, 1.0);
    }
    let hit = prompt.tokens().iter().filter(|&&t| report.present(t as usize)).count();
    let groups: Vec<Group> = prompt.tokens().iter().map(|&t| Vocabulary::group(t as usize)).collect();
    let detected: Vec<usize> = report
        .detected()
        .into_iter()
        .filter(|&d| groups.contains(&Vocabulary::group(d)))
        .collect();
    let precision = if detected.is_empty() {
        0.0
    } else {
        detected.iter().filter(|&&d| prompt.contains(d)).count() as f64 / detected.len() as f64
    };
    (precision, hit as f64 / prompt.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub steps: usize,
    pub sliced_wasserstein: f64,
    /// Mean per-sample squared error against the reference set.
    pub mse: f64,
    pub precision: f64,
    pub recall: f64,
    /// Fraction of samples showing any phrase of their negative prompt.
    pub negative_presence: f64,
    pub nfe: u64,
    /// Mean wall time per sample.
    pub wall_ms: f64,
}

pub const EVAL_CSV_HEADER: &str = "model,steps,sliced_wasserstein,mse,precision,recall,negative_presence,nfe,wall_ms";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.4},{:.4},{:.4},{},{:.4}",
            self.model,
            self.steps,
            self.sliced_wasserstein,
            self.mse,
            self.precision,
            self.recall,
            self.negative_presence,
            self.nfe,
            self.wall_ms
        )
    }
}

/// Many-step guided teacher samples used as ground truth.
pub fn reference_set(
    teacher: &TeacherModel,
    requests: &[SampleRequest],
    steps: usize,
    w: f64,
    threads: usize,
) -> Result<Vec<SampleTrace>> {
    sample_teacher_cfg(teacher, requests, w, SampleOptions { threads, ..SampleOptions::new(steps) })
}

/// Samples `candidate` at `steps` from the reference's own seeds and
/// compares it with the reference pair by pair and as a set.
pub fn kd_consistency(
    model: &str,
    candidate: Sampler,
    requests: &[SampleRequest],
    steps: usize,
    reference: &[SampleTrace],
    threads: usize,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let traces = sample(candidate, requests, SampleOptions { threads, ..SampleOptions::new(steps) })?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3 / requests.len().max(1) as f64;
    let mse = paired_mse(&traces, reference)?;
    let sw = sliced_wasserstein(&images(&traces), &images(reference), DEFAULT_PROJECTIONS, 0)?;
    let (mut precision, mut recall, mut negative) = (0.0, 0.0, 0.0);
    for (img, req) in images(&traces).iter().zip(requests) {
        let report = attribute_oracle(img);
        let (p, r) = prompt_agreement(&report, &req.positive);
        precision += p;
        recall += r;
        if req.negative.tokens().iter().any(|&t| report.present(t as usize)) {
            negative += 1.0;
        }
    }
    let n = requests.len() as f64;
    Ok(EvalReport {
        model: model.to_string(),
        steps,
        sliced_wasserstein: sw,
        mse,
        precision: precision / n,
        recall: recall / n,
        negative_presence: negative / n,
        nfe: traces.first().map_or(0, |t| t.nfe),
        wall_ms,
    })
}

/// Positive prompt of a held-out example with corruptions and marks removed.
pub fn clean_positive(prompt: &Prompt) -> Prompt {
    let kept = prompt
        .tokens()
        .iter()
        .copied()
        .filter(|&t| !matches!(Vocabulary::group(t as usize), Group::Corruption | Group::Mark))
        .collect();
    Prompt::new(kept).expect("subset of a valid prompt")
}

/// `count` requests cycling through the cleaned captions of `data`, with
/// seeds `seed, seed + 1, ...`.
pub fn eval_requests(data: &Dataset, count: usize, negative: &Prompt, seed: u64) -> Vec<SampleRequest> {
    (0..count)
        .map(|i| SampleRequest {
            positive: clean_positive(&data.examples[i % data.len()].prompt),
            negative: negative.clone(),
            seed: seed + i as u64,
        })
        .collect()
}

/// Held-out requests for distance evaluations: cleaned captions of a fresh
/// dataset drawn from `prompt_seed`, each with a negative prompt drawn like
/// the training negatives (occasionally empty).
pub fn heldout_requests(count: usize, prompt_seed: u64) -> Result<Vec<SampleRequest>> {
    let held_out = make_dataset(count.max(1), prompt_seed, &DataConfig::default())?;
    let mut reqs = eval_requests(&held_out, count, &Prompt::empty(), prompt_seed.wrapping_mul(1_000_003));
    for (i, r) in reqs.iter_mut().enumerate() {
        r.negative = sample_negative_prompt(&mut stream(prompt_seed, "eval-negative", i as u64));
    }
    Ok(reqs)
}

/// Presence rates of each probed phrase under an empty negative prompt and
/// with each phrase used as the negative prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTable {
    pub phrases: Vec<usize>,
    /// `control[j]`: rate of phrase `j` with the empty negative prompt.
    pub control: Vec<f64>,
    /// `cells[i][j]`: rate of phrase `j` when phrase `i` is the negative.
    pub cells: Vec<Vec<f64>>,
    pub samples_per_cell: usize,
}

impl ControlTable {
    /// Relative drop of phrase `i` when it is negated; `NaN` when the
    /// control never shows it.
    pub fn reduction(&self, i: usize) -> f64 {
        let c = self.control[i];
        if c == 0.0 {
            f64::NAN
        } else {
            (c - self.cells[i][i]) / c
        }
    }

    pub fn csv(&self) -> String {
        let names: Vec<&str> = self.phrases.iter().map(|&p| Vocabulary::name(p)).collect();
        let mut out = format!("negative,{},samples\n", names.join(","));
        let row = |label: &str, rates: &[f64]| {
            let r: Vec<String> = rates.iter().map(|v| format!("{v:.4}")).collect();
            format!("{label},{},{}\n", r.join(","), self.samples_per_cell)
        };
        out += &row("(empty)", &self.control);
        for (i, cell) in self.cells.iter().enumerate() {
            out += &row(names[i], cell);
        }
        out
    }
}

fn presence_rates(traces: &[SampleTrace], phrases: &[usize]) -> Vec<f64> {
    let reports: Vec<AttributeReport> = images(traces).iter().map(|x| attribute_oracle(x)).collect();
    phrases
        .iter()
        .map(|&p| reports.iter().filter(|r| r.present(p)).count() as f64 / reports.len().max(1) as f64)
        .collect()
}

/// Every cell reuses the same positives and seeds as the control.
pub fn negative_control_eval(
    model: Sampler,
    data: &Dataset,
    phrases: &[usize],
    samples_per_cell: usize,
    steps: usize,
    seed: u64,
    threads: usize,
) -> Result<ControlTable> {
    if samples_per_cell == 0 || phrases.is_empty() || data.is_empty() {
        return Err(Error::Usage("negative control needs samples, phrases and prompts".into()));
    }
    let opts = SampleOptions { threads, ..SampleOptions::new(steps) };
    let control_reqs = eval_requests(data, samples_per_cell, &Prompt::empty(), seed);
    let control = presence_rates(&sample(model, &control_reqs, opts)?, phrases);
    let mut cells = Vec::with_capacity(phrases.len());
    for &p in phrases {
        let reqs = eval_requests(data, samples_per_cell, &Prompt::empty().with(p)?, seed);
        cells.push(presence_rates(&sample(model, &reqs, opts)?, phrases));
    }
    Ok(ControlTable {
        phrases: phrases.to_vec(),
        control,
        cells,
        samples_per_cell,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: String,
    pub steps_a: usize,
    pub steps_b: usize,
    /// Mean per-sample squared error between the two step counts.
    pub cross_mse: f64,
}

pub const ABLATION_CSV_HEADER: &str = "model,steps_a,steps_b,cross_mse";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.6}", self.model, self.steps_a, self.steps_b, self.cross_mse)
    }
}

/// Same model, same seeds, two step counts.
pub fn msc_ablation(
    models: &[(String, Sampler)],
    requests: &[SampleRequest],
    steps_a: usize,
    steps_b: usize,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    models
        .iter()
        .map(|(name, m)| {
            let run = |steps| sample(*m, requests, SampleOptions { threads, ..SampleOptions::new(steps) });
            let a = run(steps_a)?;
            let b = if steps_b == steps_a { a.clone() } else { run(steps_b)? };
            Ok(AblationRow {
                model: name.clone(),
                steps_a,
                steps_b,
                cross_mse: paired_mse(&a, &b)?,
            })
        })
        .collect()
}
