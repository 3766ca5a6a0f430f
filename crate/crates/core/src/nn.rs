//! Small layer wrappers over the tape and a multi-head attention helper.

use crate::autodiff::{KeyMask, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{Scalar, Tensor};

fn scaled_normal(rng: &mut Rng, shape: &[usize], std: f32) -> Tensor<f32> {
    let mut t = normal_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v *= std);
    t
}

/// `x @ w (+ b)` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = scaled_normal(rng, &[fan_in, fan_out], (fan_in as f32).powf(-0.5));
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_last_axis(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel convolution with "same" padding and a bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut Rng,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let w = if zero_init {
            Tensor::zeros(&shape)
        } else {
            scaled_normal(rng, &shape, ((cin * kernel * kernel) as f32).powf(-0.5))
        };
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true),
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.conv2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            groups: groups.min(channels),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Scaled dot-product attention with `heads` heads.
///
/// `q: [b, lq, d]`, `k, v: [b, lk, d]`; `keep` has `b * lk` flags marking the
/// keys each batch element may attend to. Returns `[b, lq, d]`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    keep: &[bool],
    heads: usize,
) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || qs[2] % heads != 0 {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let (b, lq, d, lk) = (qs[0], qs[1], qs[2], ks[1]);
    if tape.shape(v) != ks.as_slice() || keep.len() != b * lk {
        return Err(Error::shape("attention", &ks, tape.shape(v)));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, x: Var, len: usize, perm: &[usize], out: [usize; 3]| -> Result<Var> {
        let x = tape.reshape(x, &[b, len, heads, dh])?;
        let x = tape.permute(x, perm)?;
        tape.reshape(x, &out)
    };
    let qh = split(tape, q, lq, &[0, 2, 1, 3], [b * heads, lq, dh])?;
    let kt = split(tape, k, lk, &[0, 2, 3, 1], [b * heads, dh, lk])?;
    let vh = split(tape, v, lk, &[0, 2, 1, 3], [b * heads, lk, dh])?;
    let scores = tape.bmm(qh, kt)?;
    let scores = tape.scale(scores, (dh as f64).powf(-0.5))?;
    let mask = KeyMask {
        keep: keep.to_vec(),
        keys: lk,
        rows_per_group: heads * lq,
    };
    let p = tape.softmax(scores, Some(&mask))?;
    let o = tape.bmm(p, vh)?;
    let o = tape.reshape(o, &[b, heads, lq, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    tape.reshape(o, &[b, lq, d])
}
