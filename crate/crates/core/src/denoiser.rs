//! Prompt-conditioned U-Net noise predictor, classifier-free guidance and
//! teacher training.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::adapter::NegativeBranch;
use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{Dataset, SIDE};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Conv, GroupNorm, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::prompt::{EncodedPrompts, Group, Prompt, PromptEncoder, Vocabulary, EMBED_DIM, MAX_PROMPT_LEN};
use crate::rng::{normal_tensor, stream, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Channels at 16x16, 8x8 and 4x4.
    pub widths: [usize; 3],
    pub groups: usize,
    /// Sinusoidal features fed to the time MLP.
    pub time_features: usize,
    pub time_dim: usize,
    /// Query/key/value width of cross-attention.
    pub attn_dim: usize,
    pub heads: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            groups: 8,
            time_features: 32,
            time_dim: 64,
            attn_dim: EMBED_DIM,
            heads: 4,
        }
    }
}

impl UNetConfig {
    /// Narrow variant for single-core runs; same topology.
    pub fn compact() -> Self {
        Self {
            widths: [16, 32, 32],
            groups: 4,
            time_features: 32,
            time_dim: 32,
            ..Self::default()
        }
    }

    pub fn tiny() -> Self {
        Self {
            widths: [8, 16, 16],
            groups: 4,
            time_features: 16,
            time_dim: 16,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &UNetConfig, rng: &mut Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, false, rng),
            time: Linear::new(store, &format!("{name}.time"), cfg.time_dim, cout, true, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, false, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, false, rng)),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, h: Var, temb: Var) -> Result<Var> {
        let a = self.norm1.forward(tape, store, h)?;
        let a = tape.silu(a)?;
        let a = self.conv1.forward(tape, store, a)?;
        let t = self.time.forward(tape, store, temb)?;
        let a = tape.add_channel(a, t)?;
        let a = self.norm2.forward(tape, store, a)?;
        let a = tape.silu(a)?;
        let a = self.conv2.forward(tape, store, a)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, store, h)?,
            None => h,
        };
        tape.add(a, skip)
    }
}

/// Cross-attention from image tokens to prompt tokens. The key and value
/// projections are the weights a negative-prompt adapter duplicates.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &UNetConfig, rng: &mut Rng) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, cfg.groups),
            q: Linear::new(store, &format!("{name}.q"), channels, cfg.attn_dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), EMBED_DIM, cfg.attn_dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), EMBED_DIM, cfg.attn_dim, false, rng),
            o: Linear::new(store, &format!("{name}.o"), cfg.attn_dim, channels, false, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        h: Var,
        block: usize,
        heads: usize,
        positive: &EncodedPrompts,
        negative: Option<&NegativeBranch>,
    ) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.norm.forward(tape, store, h)?;
        let x = tape.reshape(x, &[b, c, hw])?;
        let x = tape.permute(x, &[0, 2, 1])?;
        let x = tape.reshape(x, &[b * hw, c])?;
        let q = self.q.forward(tape, store, x)?;
        let d = tape.shape(q)[1];
        let q = tape.reshape(q, &[b, hw, d])?;
        let zp = attend(tape, store, &self.k, &self.v, q, positive, heads)?;
        let z = match negative {
            Some(neg) => neg.combine(tape, block, q, zp, heads)?,
            None => zp,
        };
        let z = tape.reshape(z, &[b * hw, d])?;
        let out = self.o.forward(tape, store, z)?;
        let out = tape.reshape(out, &[b, hw, c])?;
        let out = tape.permute(out, &[0, 2, 1])?;
        let out = tape.reshape(out, &shape)?;
        tape.add(h, out)
    }
}

/// Attention of `q: [b, hw, d]` over encoded prompts through the given key
/// and value projections.
pub(crate) fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    k: &Linear,
    v: &Linear,
    q: Var,
    prompts: &EncodedPrompts,
    heads: usize,
) -> Result<Var> {
    let b = prompts.batch;
    if tape.shape(q)[0] != b {
        return Err(Error::shape("cross_attention", tape.shape(q), &[b, MAX_PROMPT_LEN, EMBED_DIM]));
    }
    let e = tape.reshape(prompts.embedding, &[b * MAX_PROMPT_LEN, EMBED_DIM])?;
    let kk = k.forward(tape, store, e)?;
    let vv = v.forward(tape, store, e)?;
    let d = tape.shape(kk)[1];
    let kk = tape.reshape(kk, &[b, MAX_PROMPT_LEN, d])?;
    let vv = tape.reshape(vv, &[b, MAX_PROMPT_LEN, d])?;
    multi_head_attention(tape, q, kk, vv, &prompts.keep, heads)
}

/// The prompt-conditioned noise predictor.
#[derive(Debug)]
pub struct TeacherModel {
    pub config: UNetConfig,
    pub store: ParamStore,
    pub encoder: PromptEncoder,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    enc0: [ResBlock; 2],
    down0: Conv,
    enc1: [ResBlock; 2],
    down1: Conv,
    enc2: [ResBlock; 2],
    /// Two blocks at 8x8 followed by two at 4x4.
    pub attention: Vec<CrossAttention>,
    up1: Conv,
    dec1: [ResBlock; 2],
    up0: Conv,
    dec0: [ResBlock; 2],
    out_norm: GroupNorm,
    conv_out: Conv,
    nfe: AtomicU64,
}

impl Clone for TeacherModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            conv_in: self.conv_in.clone(),
            enc0: self.enc0.clone(),
            down0: self.down0.clone(),
            enc1: self.enc1.clone(),
            down1: self.down1.clone(),
            enc2: self.enc2.clone(),
            attention: self.attention.clone(),
            up1: self.up1.clone(),
            dec1: self.dec1.clone(),
            up0: self.up0.clone(),
            dec0: self.dec0.clone(),
            out_norm: self.out_norm.clone(),
            conv_out: self.conv_out.clone(),
            nfe: AtomicU64::new(0),
        }
    }
}

impl TeacherModel {
    pub fn new(config: UNetConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "init", 0);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let [c0, c1, c2] = config.widths;
        let cfg = &config;
        let encoder = PromptEncoder::new(s, rng);
        let time1 = Linear::new(s, "time.fc1", cfg.time_features, cfg.time_dim, true, rng);
        let time2 = Linear::new(s, "time.fc2", cfg.time_dim, cfg.time_dim, true, rng);
        let conv_in = Conv::new(s, "conv_in", 1, c0, 3, 1, false, rng);
        let enc0 = [
            ResBlock::new(s, "enc0.res0", c0, c0, cfg, rng),
            ResBlock::new(s, "enc0.res1", c0, c0, cfg, rng),
        ];
        let down0 = Conv::new(s, "down0", c0, c1, 3, 2, false, rng);
        let enc1 = [
            ResBlock::new(s, "enc1.res0", c1, c1, cfg, rng),
            ResBlock::new(s, "enc1.res1", c1, c1, cfg, rng),
        ];
        let mut attention = vec![
            CrossAttention::new(s, "enc1.attn0", c1, cfg, rng),
            CrossAttention::new(s, "enc1.attn1", c1, cfg, rng),
        ];
        let down1 = Conv::new(s, "down1", c1, c2, 3, 2, false, rng);
        let enc2 = [
            ResBlock::new(s, "enc2.res0", c2, c2, cfg, rng),
            ResBlock::new(s, "enc2.res1", c2, c2, cfg, rng),
        ];
        attention.push(CrossAttention::new(s, "enc2.attn0", c2, cfg, rng));
        attention.push(CrossAttention::new(s, "enc2.attn1", c2, cfg, rng));
        let up1 = Conv::new(s, "up1", c2, c1, 3, 1, false, rng);
        let dec1 = [
            ResBlock::new(s, "dec1.res0", 2 * c1, c1, cfg, rng),
            ResBlock::new(s, "dec1.res1", c1, c1, cfg, rng),
        ];
        let up0 = Conv::new(s, "up0", c1, c0, 3, 1, false, rng);
        let dec0 = [
            ResBlock::new(s, "dec0.res0", 2 * c0, c0, cfg, rng),
            ResBlock::new(s, "dec0.res1", c0, c0, cfg, rng),
        ];
        let out_norm = GroupNorm::new(s, "out.norm", c0, cfg.groups);
        let conv_out = Conv::new(s, "out.conv", c0, 1, 3, 1, true, rng);
        Self {
            config,
            store,
            encoder,
            time1,
            time2,
            conv_in,
            enc0,
            down0,
            enc1,
            down1,
            enc2,
            attention,
            up1,
            dec1,
            up0,
            dec0,
            out_norm,
            conv_out,
            nfe: AtomicU64::new(0),
        }
    }

    /// Total network evaluations, counted per batch element.
    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    pub fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }

    pub fn architecture_hash(&self) -> u64 {
        self.store.architecture_hash()
    }

    /// Stops gradient flow into every teacher parameter.
    pub fn freeze(&mut self) {
        self.store.set_trainable(false);
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, prompts: &[Prompt]) -> Result<EncodedPrompts> {
        self.encoder.encode(tape, &self.store, prompts)
    }

    /// Noise prediction for `z: [b, 1, 16, 16]` at times `ts`. With a
    /// negative branch every cross-attention output is replaced by the
    /// adapter's combination.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        z: Var,
        ts: &[f64],
        positive: &EncodedPrompts,
        negative: Option<&NegativeBranch>,
    ) -> Result<Var> {
        let b = tape.shape(z)[0];
        if tape.shape(z) != [b, 1, SIDE, SIDE] || ts.len() != b || positive.batch != b {
            return Err(Error::shape("teacher_forward", tape.shape(z), &[ts.len(), 1, SIDE, SIDE]));
        }
        if let Some(n) = negative {
            if n.prompts.batch != b {
                return Err(Error::shape("teacher_forward", &[b], &[n.prompts.batch]));
            }
        }
        self.nfe.fetch_add(b as u64, Ordering::Relaxed);
        let store = &self.store;
        let heads = self.config.heads;
        let te = tape.time_embedding(ts, self.config.time_features)?;
        let te = self.time1.forward(tape, store, te)?;
        let te = tape.silu(te)?;
        let te = self.time2.forward(tape, store, te)?;
        let te = tape.silu(te)?;

        let mut h = self.conv_in.forward(tape, store, z)?;
        for r in &self.enc0 {
            h = r.forward(tape, store, h, te)?;
        }
        let skip0 = h;
        h = self.down0.forward(tape, store, h)?;
        for (i, r) in self.enc1.iter().enumerate() {
            h = r.forward(tape, store, h, te)?;
            h = self.attention[i].forward(tape, store, h, i, heads, positive, negative)?;
        }
        let skip1 = h;
        h = self.down1.forward(tape, store, h)?;
        for (i, r) in self.enc2.iter().enumerate() {
            h = r.forward(tape, store, h, te)?;
            h = self.attention[2 + i].forward(tape, store, h, 2 + i, heads, positive, negative)?;
        }
        h = tape.upsample2x(h)?;
        h = self.up1.forward(tape, store, h)?;
        h = tape.concat(&[h, skip1], 1)?;
        for r in &self.dec1 {
            h = r.forward(tape, store, h, te)?;
        }
        h = tape.upsample2x(h)?;
        h = self.up0.forward(tape, store, h)?;
        h = tape.concat(&[h, skip0], 1)?;
        for r in &self.dec0 {
            h = r.forward(tape, store, h, te)?;
        }
        h = self.out_norm.forward(tape, store, h)?;
        h = tape.silu(h)?;
        self.conv_out.forward(tape, store, h)
    }

    /// Conditional prediction without recording gradients.
    pub fn predict(&self, z: &Tensor<f32>, ts: &[f64], prompts: &[Prompt]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let e = self.encode(&mut tape, prompts)?;
        let zv = tape.constant(z.clone())?;
        let out = self.forward(&mut tape, zv, ts, &e, None)?;
        Ok(tape.value(out).clone())
    }

    /// Guided prediction `w eps(pos) + (1 - w) eps(neg)`, evaluated as one
    /// batch of `2b`.
    pub fn predict_cfg(
        &self,
        z: &Tensor<f32>,
        ts: &[f64],
        positive: &[Prompt],
        negative: &[Prompt],
        w: f64,
    ) -> Result<Tensor<f32>> {
        let b = ts.len();
        if positive.len() != b || negative.len() != b {
            return Err(Error::shape("predict_cfg", &[positive.len(), negative.len()], &[b]));
        }
        let zz = Tensor::new(&[2 * b, 1, SIDE, SIDE], [z.data(), z.data()].concat())?;
        let tt = [ts, ts].concat();
        let prompts: Vec<Prompt> = positive.iter().chain(negative).cloned().collect();
        let out = self.predict(&zz, &tt, &prompts)?;
        let half = b * SIDE * SIDE;
        let ep = Tensor::new(z.shape(), out.data()[..half].to_vec())?;
        let en = Tensor::new(z.shape(), out.data()[half..].to_vec())?;
        cfg_combine(&ep, &en, w)
    }
}

/// `w eps_p + (1 - w) eps_n`.
pub fn cfg_combine<T: Scalar>(eps_p: &Tensor<T>, eps_n: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    let w = T::from_f64(w);
    eps_p.zip(eps_n, "cfg_combine", |p, n| w * p + (T::one() - w) * n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Probability of replacing the caption with the empty prompt.
    pub cond_dropout: f64,
    /// Probability of dropping each non-shape phrase of a kept caption.
    pub phrase_dropout: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            cond_dropout: 0.1,
            phrase_dropout: 0.5,
            seed: 0,
            threads: 1,
        }
    }
}

/// Caption actually shown to the network for one training example.
pub fn training_caption(prompt: &Prompt, cfg: &TeacherTrainConfig, rng: &mut Rng) -> Prompt {
    if rng.gen_bool(cfg.cond_dropout) {
        return Prompt::empty();
    }
    drop_phrases(prompt, cfg.phrase_dropout, rng)
}

/// Drops each non-shape phrase independently with probability `p`.
pub fn drop_phrases(prompt: &Prompt, p: f64, rng: &mut Rng) -> Prompt {
    let kept: Vec<u8> = prompt
        .tokens()
        .iter()
        .copied()
        .filter(|&t| Vocabulary::group(t as usize) == Group::Shape || !rng.gen_bool(p))
        .collect();
    Prompt::new(kept).expect("subset of a valid prompt")
}

/// One training batch: noisy inputs, times, target noise and captions.
pub struct NoisyBatch {
    pub z: Tensor<f32>,
    pub ts: Vec<f64>,
    pub eps: Tensor<f32>,
    pub prompts: Vec<Prompt>,
}

/// Data-parallel loss and gradients: the batch is split into `threads`
/// contiguous chunks, each differentiated on its own tape. Chunk losses are
/// weighted by their share of the batch, so the summed gradients equal the
/// full-batch gradient. Results come back in chunk order.
pub(crate) fn parallel_grad<F>(batch: usize, threads: usize, chunk_loss: F) -> Result<(f64, Vec<Gradients<f32>>)>
where
    F: Fn(Range<usize>, &mut Tape<f32>) -> Result<Var> + Sync,
{
    let threads = threads.clamp(1, batch.max(1));
    let per = batch.div_ceil(threads);
    let ranges: Vec<_> = (0..threads)
        .map(|i| (i * per).min(batch)..((i + 1) * per).min(batch))
        .filter(|r| !r.is_empty())
        .collect();
    let run = |r: Range<usize>| -> Result<(f64, Gradients<f32>)> {
        let mut tape = Tape::<f32>::new();
        let weight = r.len() as f64 / batch as f64;
        let loss = chunk_loss(r, &mut tape)?;
        let loss = tape.scale(loss, weight)?;
        let value = tape.value(loss).item().as_f64();
        Ok((value, tape.backward(loss)?))
    };
    let results: Vec<Result<(f64, Gradients<f32>)>> = if ranges.len() == 1 {
        vec![run(ranges[0].clone())]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges.iter().cloned().map(|r| s.spawn(|| run(r))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(results.len());
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Standard noise-prediction training on `data`. Used both from scratch and
/// for style fine-tuning of an existing teacher. Returns the per-step loss.
pub fn train_teacher(
    model: &mut TeacherModel,
    data: &Dataset,
    cfg: &TeacherTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    model.store.set_trainable(true);
    let schedule = NoiseSchedule::default();
    let mut opt = AdamW::new(cfg.optimizer, &model.store);
    let mut rng = stream(cfg.seed, "teacher-train", 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(data, cfg, &schedule, &mut rng)?;
        let m = &*model;
        let (loss, grads) = parallel_grad(cfg.batch, cfg.threads, |r, tape| {
            let z = slice_batch(&batch.z, r.clone())?;
            let eps = slice_batch(&batch.eps, r.clone())?;
            let e = m.encode(tape, &batch.prompts[r.clone()])?;
            let zv = tape.constant(z)?;
            let pred = m.forward(tape, zv, &batch.ts[r], &e, None)?;
            let target = tape.constant(eps)?;
            tape.mse(pred, target)
        })?;
        model.store.zero_grad();
        for g in &grads {
            model.store.accumulate(g);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(&mut model.store)?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(losses)
}

fn draw_batch(data: &Dataset, cfg: &TeacherTrainConfig, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<NoisyBatch> {
    let b = cfg.batch;
    let mut x0 = Vec::with_capacity(b * SIDE * SIDE);
    let mut prompts = Vec::with_capacity(b);
    let mut ts = Vec::with_capacity(b);
    for _ in 0..b {
        let ex = &data.examples[rng.gen_range(0..data.len())];
        x0.extend_from_slice(&ex.pixels);
        prompts.push(training_caption(&ex.prompt, cfg, rng));
        ts.push(schedule.discrete_time(rng.gen_range(1..=schedule.train_steps)));
    }
    let x0 = Tensor::new(&[b, 1, SIDE, SIDE], x0)?;
    let eps = normal_tensor(rng, &[b, 1, SIDE, SIDE]);
    let z = schedule.add_noise_batch(&x0, &eps, &ts)?;
    Ok(NoisyBatch { z, ts, eps, prompts })
}

/// Leading-axis slice of a tensor.
pub fn slice_batch<T: Scalar>(x: &Tensor<T>, r: Range<usize>) -> Result<Tensor<T>> {
    let inner: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = r.len();
    Tensor::new(&shape, x.data()[r.start * inner..r.end * inner].to_vec())
}
