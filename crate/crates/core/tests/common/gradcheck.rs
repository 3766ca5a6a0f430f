//! Central finite-difference gradient oracle and randomized graph builders.
//! Everything here evaluates on `Tape<f64>`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunplug::{KeyMask, Result, Tape, Tensor, Var};

pub type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Graph {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

fn eval(inputs: &[Tensor<f64>], build: &Builder) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.constant(t.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Largest per-input relative error `|a - n| / max(|a|, |n|)` (vector norms)
/// between the tape gradient and a central difference with
/// `h = 1e-4 * max(1, |x|)`.
pub fn max_relative_error(graph: &Graph) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = graph
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let out = (graph.build)(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in graph.inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let x = input.data()[j];
            let h = 1e-4 * x.abs().max(1.0);
            let mut plus = graph.inputs.clone();
            plus[i].data_mut()[j] = x + h;
            let mut minus = graph.inputs.clone();
            minus[i].data_mut()[j] = x - h;
            numeric.push((eval(&plus, &graph.build) - eval(&minus, &graph.build)) / (2.0 * h));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 1e-12 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0) * scale)
}

pub const TEMPLATES: usize = 9;

/// Every tensor operation appears in at least one template; each template
/// chains at least three operations.
pub fn random_graph(index: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match index % TEMPLATES {
        0 => {
            let (n, k, m) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
            let w = rand_tensor(&mut rng, &[n, m], 1.0);
            Graph {
                name: "linear-silu",
                inputs: vec![
                    rand_tensor(&mut rng, &[n, k], 1.0),
                    rand_tensor(&mut rng, &[k, m], 1.0),
                    rand_tensor(&mut rng, &[m], 1.0),
                ],
                build: Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    let y = t.add_last_axis(y, v[2])?;
                    let y = t.silu(y)?;
                    let c = t.constant(w.clone())?;
                    let y = t.mul(y, c)?;
                    t.sum(y)
                }),
            }
        }
        1 => {
            let (lq, lk, d) = (rng.gen_range(1..5), rng.gen_range(2..5), rng.gen_range(2..5));
            let mut keep: Vec<bool> = (0..lk).map(|_| rng.gen_bool(0.7)).collect();
            keep[0] = true;
            let target = rand_tensor(&mut rng, &[lq, d], 1.0);
            Graph {
                name: "masked-attention",
                inputs: vec![
                    rand_tensor(&mut rng, &[lq, d], 1.0),
                    rand_tensor(&mut rng, &[lk, d], 1.0),
                    rand_tensor(&mut rng, &[lk, d], 1.0),
                ],
                build: Box::new(move |t, v| {
                    let kt = t.transpose(v[1])?;
                    let s = t.matmul(v[0], kt)?;
                    let s = t.scale(s, 0.7)?;
                    let mask = KeyMask {
                        keep: keep.clone(),
                        keys: lk,
                        rows_per_group: lq,
                    };
                    let p = t.softmax(s, Some(&mask))?;
                    let o = t.matmul(p, v[2])?;
                    let tg = t.constant(target.clone())?;
                    t.mse(o, tg)
                }),
            }
        }
        2 => {
            let (p, m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..4));
            let w = rand_tensor(&mut rng, &[m, p, n], 1.0);
            Graph {
                name: "bmm-softmax-permute",
                inputs: vec![
                    rand_tensor(&mut rng, &[p, m, k], 1.0),
                    rand_tensor(&mut rng, &[p, k, n], 1.0),
                ],
                build: Box::new(move |t, v| {
                    let y = t.bmm(v[0], v[1])?;
                    let y = t.softmax(y, None)?;
                    let y = t.permute(y, &[1, 0, 2])?;
                    let y = t.reshape(y, &[m * p * n])?;
                    let c = t.constant(w.clone().reshape(&[m * p * n])?)?;
                    let y = t.mul(y, c)?;
                    t.mean(y)
                }),
            }
        }
        3 => {
            let (b, ci, co, hw) = (rng.gen_range(1..3), rng.gen_range(1..4), 4, rng.gen_range(3..6));
            let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
            let groups = if rng.gen_bool(0.5) { 1 } else { 2 };
            let wout = rand_tensor(&mut rng, &[1, co, 3, 3], 1.0);
            Graph {
                name: "conv-groupnorm-silu-conv",
                inputs: vec![
                    rand_tensor(&mut rng, &[b, ci, hw, hw], 1.0),
                    rand_tensor(&mut rng, &[co, ci, 3, 3], 0.5),
                    rand_tensor(&mut rng, &[co], 0.5),
                    Tensor::from_fn(&[co], |i| 1.0 + 0.1 * i as f64),
                    rand_tensor(&mut rng, &[co], 0.5),
                ],
                build: Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
                    let y = t.group_norm(y, v[3], v[4], groups)?;
                    let y = t.silu(y)?;
                    let w = t.constant(wout.clone())?;
                    let y = t.conv2d(y, w, None, stride)?;
                    let y = t.mul(y, y)?;
                    t.sum(y)
                }),
            }
        }
        4 => {
            let (b, c, hw) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(2..4));
            let target = rand_tensor(&mut rng, &[b, 3, 2 * hw, 2 * hw], 1.0);
            Graph {
                name: "upsample-concat-conv1x1-channel",
                inputs: vec![
                    rand_tensor(&mut rng, &[b, c, hw, hw], 1.0),
                    rand_tensor(&mut rng, &[b, 1, 2 * hw, 2 * hw], 1.0),
                    rand_tensor(&mut rng, &[3, c + 1, 1, 1], 1.0),
                    rand_tensor(&mut rng, &[b, 3], 1.0),
                ],
                build: Box::new(move |t, v| {
                    let u = t.upsample2x(v[0])?;
                    let y = t.concat(&[u, v[1]], 1)?;
                    let y = t.conv2d(y, v[2], None, 1)?;
                    let y = t.add_channel(y, v[3])?;
                    let tg = t.constant(target.clone())?;
                    t.mse(y, tg)
                }),
            }
        }
        5 => {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(2..5));
            let w = rand_tensor(&mut rng, &[r, c], 1.0);
            Graph {
                name: "norm-ratio-scale",
                inputs: vec![
                    rand_tensor(&mut rng, &[r, c], 1.0),
                    rand_tensor(&mut rng, &[r, c], 1.0),
                    rand_tensor(&mut rng, &[1], 1.0),
                    rand_tensor(&mut rng, &[1], 1.0),
                ],
                build: Box::new(move |t, v| {
                    let np = t.l2norm(v[0])?;
                    let nn = t.l2norm(v[1])?;
                    let ratio = t.safe_div(np, nn, 1e-8)?;
                    let y = t.scale_rows(v[1], ratio)?;
                    let y = t.mul_scalar_var(y, v[2])?;
                    let y = t.add_scalar_var(y, v[3])?;
                    let y = t.sub(v[0], y)?;
                    let c = t.constant(w.clone())?;
                    let y = t.mul(y, c)?;
                    t.mean(y)
                }),
            }
        }
        6 => {
            let (vocab, l, d) = (rng.gen_range(3..6), rng.gen_range(2..5), rng.gen_range(2..4));
            let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..vocab)).collect();
            let keep: Vec<bool> = (0..l).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
            Graph {
                name: "gather-mask-add",
                inputs: vec![
                    rand_tensor(&mut rng, &[vocab, d], 1.0),
                    rand_tensor(&mut rng, &[l, d], 1.0),
                ],
                build: Box::new(move |t, v| {
                    let e = t.gather_rows(v[0], &ids)?;
                    let e = t.add(e, v[1])?;
                    let e = t.mask_rows(e, &keep)?;
                    let e = t.scale(e, 1.5)?;
                    let e = t.add_const(e, 0.25)?;
                    let e = t.mul(e, e)?;
                    t.sum(e)
                }),
            }
        }
        7 => {
            let (n, d, m) = (rng.gen_range(1..4), 8, rng.gen_range(1..4));
            let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
            Graph {
                name: "time-embedding-mlp",
                inputs: vec![rand_tensor(&mut rng, &[d, m], 1.0), rand_tensor(&mut rng, &[m], 1.0)],
                build: Box::new(move |t, v| {
                    let e = t.time_embedding(&ts, d)?;
                    let y = t.matmul(e, v[0])?;
                    let y = t.add_last_axis(y, v[1])?;
                    let y = t.silu(y)?;
                    let y = t.mul(y, y)?;
                    t.sum(y)
                }),
            }
        }
        _ => {
            let (b, c, hw): (usize, usize, usize) = (rng.gen_range(1..3), 2, rng.gen_range(4..7));
            let target = rand_tensor(&mut rng, &[b, c, hw.div_ceil(2), hw.div_ceil(2)], 1.0);
            Graph {
                name: "strided-conv-residual",
                inputs: vec![
                    rand_tensor(&mut rng, &[b, c, hw, hw], 1.0),
                    rand_tensor(&mut rng, &[c, c, 3, 3], 0.5),
                    rand_tensor(&mut rng, &[c], 0.5),
                ],
                build: Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 2)?;
                    let s = t.silu(y)?;
                    let y = t.add(y, s)?;
                    let tg = t.constant(target.clone())?;
                    t.mse(y, tg)
                }),
            }
        }
    }
}
