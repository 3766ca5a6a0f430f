//! Adapter distillation: matching the teacher's guided noise in one pass,
//! the multi-step consistency target built from teacher DDIM rollouts, and
//! the training loop that updates only the adapter.

use std::sync::Mutex;
use std::time::Instant;

use rand::Rng as _;

use crate::adapter::{plug_into, StudentModel, SunAdapter};
use crate::data::{Dataset, SIDE};
use crate::denoiser::{drop_phrases, parallel_grad, slice_batch, TeacherModel};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::prompt::{sample_negative_prompt, Prompt};
use crate::rng::{normal_tensor, stream, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Guidance weight of the teacher target.
    pub w: f64,
    /// Weight of the consistency term.
    pub lambda: f64,
    /// Rollout segment length in continuous time.
    pub delta: f64,
    pub n_max: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Learning-rate multiplier for the per-block `alpha`/`beta` gains.
    pub gain_lr_scale: f32,
    /// Probability of dropping each non-shape phrase of a positive caption.
    pub phrase_dropout: f64,
    /// Norm-ratio rescaling of the negative features.
    pub normalize: bool,
    pub threads: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            w: 8.0,
            lambda: 0.1,
            delta: 0.25,
            n_max: 3,
            batch: 32,
            steps: 5000,
            seed: 0,
            optimizer: AdamWConfig::default(),
            gain_lr_scale: 100.0,
            phrase_dropout: 0.5,
            normalize: true,
            threads: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if self.n_max == 0 || self.n_max as f64 * self.delta > 1.0 + 1e-12 {
            return bad(format!("n_max * delta must lie in (0, 1], got {} * {}", self.n_max, self.delta));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !self.w.is_finite() {
            return bad(format!("guidance weight must be finite, got {}", self.w));
        }
        if !(0.0..=1.0).contains(&self.phrase_dropout) {
            return bad(format!("phrase_dropout must lie in [0, 1], got {}", self.phrase_dropout));
        }
        Ok(())
    }
}

/// Largest admissible segment count for a rollout starting at `t`.
pub fn max_segments(t: f64, delta: f64, n_max: usize) -> usize {
    let fit = (t / delta + 1e-9).floor() as usize;
    fit.min(n_max).max(1)
}

/// Draws the segment count uniformly from `1..=max_segments(t)`.
pub fn sample_segments(t: f64, delta: f64, n_max: usize, rng: &mut Rng) -> usize {
    rng.gen_range(1..=max_segments(t, delta, n_max))
}

/// End time `t - n delta`, clipped to the schedule floor.
pub fn rollout_end(schedule: &NoiseSchedule, t: f64, n: usize, delta: f64) -> f64 {
    (t - n as f64 * delta).max(schedule.floor)
}

/// One distillation batch; the student and teacher both see `z_t`.
#[derive(Clone, Debug)]
pub struct DistillBatch {
    pub z_t: Tensor<f32>,
    pub ts: Vec<f64>,
    pub positive: Vec<Prompt>,
    pub negative: Vec<Prompt>,
    /// Rollout segment count per item.
    pub segments: Vec<usize>,
}

impl DistillBatch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Draws `cfg.batch` examples: a positive caption with phrase dropout, a
    /// fresh negative prompt, a training time and a segment count.
    pub fn draw(data: &Dataset, cfg: &DistillConfig, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let b = cfg.batch;
        let mut x0 = Vec::with_capacity(b * SIDE * SIDE);
        let (mut positive, mut negative) = (Vec::with_capacity(b), Vec::with_capacity(b));
        let (mut ts, mut segments) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for _ in 0..b {
            let ex = &data.examples[rng.gen_range(0..data.len())];
            x0.extend_from_slice(&ex.pixels);
            positive.push(drop_phrases(&ex.prompt, cfg.phrase_dropout, rng));
            negative.push(sample_negative_prompt(rng));
            // Step 1 sits on the floor, where no rollout can start.
            let t = schedule.discrete_time(rng.gen_range(2..=schedule.train_steps));
            ts.push(t);
            segments.push(sample_segments(t, cfg.delta, cfg.n_max, rng));
        }
        let x0 = Tensor::new(&[b, 1, SIDE, SIDE], x0)?;
        let eps = normal_tensor(rng, &[b, 1, SIDE, SIDE]);
        let z_t = schedule.add_noise_batch(&x0, &eps, &ts)?;
        Ok(Self {
            z_t,
            ts,
            positive,
            negative,
            segments,
        })
    }

    /// Same batch with every segment count forced to `n` (clipped per item).
    pub fn with_segments(&self, n: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.segments = self.ts.iter().map(|&t| n.min(max_segments(t, delta, usize::MAX))).collect();
        out
    }
}

/// Teacher guided noise `w eps(pos) + (1 - w) eps(neg)` for the whole batch.
pub fn cfg_target(teacher: &TeacherModel, batch: &DistillBatch, w: f64) -> Result<Tensor<f32>> {
    teacher.predict_cfg(&batch.z_t, &batch.ts, &batch.positive, &batch.negative, w)
}

/// Runs the guided teacher with DDIM from each `t_i` over `segments[i]`
/// steps of length `delta` and returns the endpoints with their times.
/// Segment counts that do not fit above the floor are reduced. `first`, if
/// given, is the guided noise at `(z_t, t)` and saves one evaluation.
pub fn msc_rollout(
    teacher: &TeacherModel,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
    w: f64,
    delta: f64,
    first: Option<&Tensor<f32>>,
) -> Result<(Tensor<f32>, Vec<f64>)> {
    let b = batch.len();
    let item_shape = [1, 1, SIDE, SIDE];
    let segments: Vec<usize> = batch
        .ts
        .iter()
        .zip(&batch.segments)
        .map(|(&t, &n)| n.max(1).min(max_segments(t, delta, usize::MAX)))
        .collect();
    let mut z: Vec<Tensor<f32>> = (0..b)
        .map(|i| Tensor::new(&item_shape, batch.z_t.outer(i).to_vec()))
        .collect::<Result<_>>()?;
    let mut now = batch.ts.clone();
    let rounds = segments.iter().copied().max().unwrap_or(0);
    for k in 0..rounds {
        let active: Vec<usize> = (0..b).filter(|&i| segments[i] > k).collect();
        let eps = match first {
            Some(e) if k == 0 => e.clone(),
            _ => {
                let zz = Tensor::stack(&active.iter().map(|&i| z[i].clone()).collect::<Vec<_>>())?
                    .reshape(&[active.len(), 1, SIDE, SIDE])?;
                let ts: Vec<f64> = active.iter().map(|&i| now[i]).collect();
                let pos: Vec<Prompt> = active.iter().map(|&i| batch.positive[i].clone()).collect();
                let neg: Vec<Prompt> = active.iter().map(|&i| batch.negative[i].clone()).collect();
                teacher.predict_cfg(&zz, &ts, &pos, &neg, w)?
            }
        };
        for (j, &i) in active.iter().enumerate() {
            let row = if k == 0 && first.is_some() { i } else { j };
            let e = Tensor::new(&item_shape, eps.outer(row).to_vec())?;
            let to = rollout_end(schedule, batch.ts[i], k + 1, delta);
            z[i] = schedule.ddim_step(&z[i], &e, now[i], to)?;
            now[i] = to;
        }
    }
    let z = Tensor::stack(&z)?.reshape(&[b, 1, SIDE, SIDE])?;
    Ok((z, now))
}

/// Single-step noise that reproduces each rollout endpoint, computed in
/// double precision.
pub fn msc_target(
    schedule: &NoiseSchedule,
    z_t: &Tensor<f32>,
    ts: &[f64],
    z_s: &Tensor<f32>,
    ss: &[f64],
) -> Result<Tensor<f32>> {
    let out = schedule.pseudo_epsilon_batch(&z_t.cast::<f64>(), ts, &z_s.cast::<f64>(), ss)?;
    Ok(out.cast())
}

/// Both regression targets for one batch.
#[derive(Clone, Debug)]
pub struct Targets {
    pub cfg: Tensor<f32>,
    pub msc: Option<Tensor<f32>>,
}

pub fn targets(
    teacher: &TeacherModel,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
    cfg: &DistillConfig,
    with_msc: bool,
) -> Result<Targets> {
    let guided = cfg_target(teacher, batch, cfg.w)?;
    let msc = if with_msc {
        let (z_s, ss) = msc_rollout(teacher, schedule, batch, cfg.w, cfg.delta, Some(&guided))?;
        Some(msc_target(schedule, &batch.z_t, &batch.ts, &z_s, &ss)?)
    } else {
        None
    };
    Ok(Targets { cfg: guided, msc })
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub cfg: f64,
    pub msc: f64,
    pub total: f64,
}

/// Mean squared error between the student and the guided teacher.
pub fn cfg_distill_loss(student: StudentModel, batch: &DistillBatch, w: f64) -> Result<f64> {
    let target = cfg_target(student.host, batch, w)?;
    student_prediction(student, batch)?.mse(&target)
}

/// Mean squared error between the student and the rollout target, using
/// the segment counts stored in `batch`.
pub fn msc_loss(student: StudentModel, schedule: &NoiseSchedule, batch: &DistillBatch, w: f64, delta: f64) -> Result<f64> {
    let (z_s, ss) = msc_rollout(student.host, schedule, batch, w, delta, None)?;
    let target = msc_target(schedule, &batch.z_t, &batch.ts, &z_s, &ss)?;
    student_prediction(student, batch)?.mse(&target)
}

/// `L_cfg + lambda L_msc`.
pub fn total_loss(student: StudentModel, schedule: &NoiseSchedule, batch: &DistillBatch, cfg: &DistillConfig) -> Result<LossParts> {
    let t = targets(student.host, schedule, batch, cfg, true)?;
    let pred = student_prediction(student, batch)?;
    let lc = pred.mse(&t.cfg)?;
    let lm = pred.mse(t.msc.as_ref().expect("requested"))?;
    Ok(LossParts {
        cfg: lc,
        msc: lm,
        total: lc + cfg.lambda * lm,
    })
}

fn student_prediction(student: StudentModel, batch: &DistillBatch) -> Result<Tensor<f32>> {
    student.predict(&batch.z_t, &batch.ts, &batch.positive, &batch.negative)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_cfg: f64,
    /// `NaN` when the consistency term is switched off.
    pub loss_msc: f64,
    pub loss_total: f64,
    pub wall_ms: u64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss_cfg,loss_msc,loss_total,wall_ms";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{}",
            self.step, self.loss_cfg, self.loss_msc, self.loss_total, self.wall_ms
        )
    }
}

/// Trains a fresh adapter on `teacher`, which stays untouched. `on_step`
/// sees every log row together with the current adapter and may abort the
/// run by returning an error.
pub fn train_adapter(
    teacher: &TeacherModel,
    data: &Dataset,
    cfg: &DistillConfig,
    mut on_step: impl FnMut(&StepLog, &SunAdapter) -> Result<()>,
) -> Result<(SunAdapter, Vec<StepLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let before = teacher.store.checksum();
    let mut host = teacher.clone();
    host.freeze();
    let mut adapter = SunAdapter::new(&host);
    adapter.normalize = cfg.normalize;
    let mut opt = AdamW::new(cfg.optimizer, &adapter.store);
    for blk in &adapter.blocks {
        opt.set_lr_scale(blk.alpha, cfg.gain_lr_scale)?;
        opt.set_lr_scale(blk.beta, cfg.gain_lr_scale)?;
    }
    let schedule = NoiseSchedule::default();
    let mut rng = stream(cfg.seed, "adapter-train", 0);
    let with_msc = cfg.lambda > 0.0;
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = DistillBatch::draw(data, cfg, &schedule, &mut rng)?;
        let tg = targets(&host, &schedule, &batch, cfg, with_msc)?;
        let student = plug_into(&adapter, &host)?;
        let parts = Mutex::new((0.0f64, 0.0f64));
        let (total, grads) = parallel_grad(batch.len(), cfg.threads, |r, tape| {
            let share = r.len() as f64 / batch.len() as f64;
            let z = tape.constant(slice_batch(&batch.z_t, r.clone())?)?;
            let pred = student.forward(
                tape,
                z,
                &batch.ts[r.clone()],
                &batch.positive[r.clone()],
                &batch.negative[r.clone()],
            )?;
            let tc = tape.constant(slice_batch(&tg.cfg, r.clone())?)?;
            let lc = tape.mse(pred, tc)?;
            let lc_value = tape.value(lc).item() as f64;
            let (loss, lm_value) = match &tg.msc {
                Some(m) => {
                    let tm = tape.constant(slice_batch(m, r.clone())?)?;
                    let lm = tape.mse(pred, tm)?;
                    let v = tape.value(lm).item() as f64;
                    let weighted = tape.scale(lm, cfg.lambda)?;
                    (tape.add(lc, weighted)?, v)
                }
                None => (lc, 0.0),
            };
            let mut p = parts.lock().expect("poisoned");
            p.0 += share * lc_value;
            p.1 += share * lm_value;
            Ok(loss)
        })?;
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        adapter.store.zero_grad();
        for g in &grads {
            adapter.store.accumulate(g);
        }
        opt.step(&mut adapter.store)?;
        let (lc, lm) = parts.into_inner().expect("poisoned");
        let row = StepLog {
            step,
            loss_cfg: lc,
            loss_msc: if with_msc { lm } else { f64::NAN },
            loss_total: total,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log.push(row);
        on_step(&row, &adapter)?;
    }
    if teacher.store.checksum() != before {
        return Err(Error::Incompatible("teacher parameters changed during adapter training".into()));
    }
    Ok((adapter, log))
}
