//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value. When at least
//! one input requires a gradient the node also remembers how to pull a
//! gradient back to its inputs; otherwise it is stored as a constant.
//! Nodes are created in topological order, so [`Tape::backward`] simply
//! walks them in reverse.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Key mask for attention softmax.
///
/// Row `r` of the score matrix (flattened over all leading axes) belongs to
/// group `r / rows_per_group`, and that group keeps key `j` iff
/// `keep[group * keys + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    pub keep: Vec<bool>,
    pub keys: usize,
    pub rows_per_group: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalarVar(Var, Var),
    AddScalarVar(Var, Var),
    AddLastAxis(Var, Var),
    AddChannel(Var, Var),
    ScaleRows(Var, Var),
    SafeDiv(Var, Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax(Var),
    L2Norm(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        /// Patch matrix from the forward pass, kept when `w` needs a gradient.
        cols: Vec<T>,
    },
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Rc<[usize]>),
    MaskRows(Var, Rc<[bool]>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(u64, ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf that was created with `requires_grad = true`.
    /// `None` means no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor<T>)> {
        self.params.iter().map(|(s, p, g)| (*s, *p, g))
    }

    /// Gradient for a parameter of `store`, summed over every leaf that
    /// loaded it.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<Tensor<T>> {
        let mut out: Option<Tensor<T>> = None;
        for (s, p, g) in &self.params {
            if *s == store.id() && *p == id {
                out = Some(match out {
                    None => g.clone(),
                    Some(acc) => acc.add(g).expect("same parameter, same shape"),
                });
            }
        }
        out
    }
}

/// A single-threaded computation record.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / last.max(1), last)
}

/// Geometry of one convolution: input `[ci, h, w]`, square kernel `k`,
/// "same" padding `k / 2`, output `[ho, wo]`.
#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose tap `kx` lands inside the input.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let pad = self.k / 2;
        let lo = pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = ((self.w + pad - kx).div_ceil(self.stride)).min(self.wo);
        (lo.min(hi), hi)
    }

    /// Writes the patch matrix of one image into columns
    /// `offset..offset + ho * wo` of `cols`, whose rows are `ld` long.
    /// Padding taps are skipped, so `cols` must start zeroed.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, offset: usize) {
        let pad = (self.k / 2) as isize;
        let (k, wo) = (self.k, self.wo);
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ld + offset..row * ld + offset + self.ho * wo];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[lo + kx - k / 2..hi + kx - k / 2]);
                        } else {
                            for ox in lo..hi {
                                out[ox] = src[ox * self.stride + kx - k / 2];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates columns back into `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, offset: usize, x: &mut [T]) {
        let pad = (self.k / 2) as isize;
        let (k, wo) = (self.k, self.wo);
        for c in 0..self.ci {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ld + offset..row * ld + offset + self.ho * wo];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let s = &src[oy * wo..(oy + 1) * wo];
                        if self.stride == 1 {
                            let d = &mut dst[lo + kx - k / 2..hi + kx - k / 2];
                            d.iter_mut().zip(&s[lo..hi]).for_each(|(d, &v)| *d = *d + v);
                        } else {
                            for ox in lo..hi {
                                let d = &mut dst[ox * self.stride + kx - k / 2];
                                *d = *d + s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 || data.is_empty() {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let (n_last, s_last) = (out_shape[rank - 1], strides[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..data.len() / n_last {
        if s_last == 1 {
            out.extend_from_slice(&data[base..base + n_last]);
        } else {
            out.extend((0..n_last).map(|j| data[base + j * s_last]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Loads a parameter; it requires a gradient iff it is trainable in `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.get(id).cast(), store.is_trainable(id))?;
        self.nodes[v.0].param = Some((store.id(), id));
        Ok(v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), name, f)?;
        let rg = self.rg(&[a, b]);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push("add_const", value, Op::AddConst(x), rg)
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<T> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(Error::shape(op, t.shape(), &[1]));
        }
        Ok(t.data()[0])
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("mul_scalar_var", s)?;
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        self.push("mul_scalar_var", value, Op::MulScalarVar(x, s), rg)
    }

    /// `x + s` for a one-element tensor `s`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("add_scalar_var", s)?;
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x, s]);
        self.push("add_scalar_var", value, Op::AddScalarVar(x, s), rg)
    }

    /// `x[..., c] + b[c]`.
    pub fn add_last_axis(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        let (_, c) = rows_of(xs.shape());
        if bs.rank() != 1 || bs.shape()[0] != c {
            return Err(Error::shape("add_last_axis", xs.shape(), bs.shape()));
        }
        let bd = bs.data();
        let data = xs
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::from_parts(xs.shape().to_vec(), data);
        let rg = self.rg(&[x, b]);
        self.push("add_last_axis", value, Op::AddLastAxis(x, b), rg)
    }

    /// `x[b, c, h, w] + v[b, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.value(x), self.value(v));
        if xs.rank() != 4 || vs.shape() != &xs.shape()[..2] {
            return Err(Error::shape("add_channel", xs.shape(), vs.shape()));
        }
        let hw = xs.shape()[2] * xs.shape()[3];
        let vd = vs.data();
        let data = xs
            .data()
            .chunks(hw)
            .zip(vd)
            .flat_map(|(plane, &b)| plane.iter().map(move |&a| a + b))
            .collect();
        let value = Tensor::from_parts(xs.shape().to_vec(), data);
        let rg = self.rg(&[x, v]);
        self.push("add_channel", value, Op::AddChannel(x, v), rg)
    }

    /// `x[r, c] * s[r]`, where `r` ranges over every leading index of `x`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x), self.value(s));
        let (rows, c) = rows_of(xs.shape());
        if ss.numel() != rows {
            return Err(Error::shape("scale_rows", xs.shape(), ss.shape()));
        }
        let data = xs
            .data()
            .chunks(c)
            .zip(ss.data())
            .flat_map(|(row, &k)| row.iter().map(move |&a| a * k))
            .collect();
        let value = Tensor::from_parts(xs.shape().to_vec(), data);
        let rg = self.rg(&[x, s]);
        self.push("scale_rows", value, Op::ScaleRows(x, s), rg)
    }

    /// Elementwise `a / b`, defined as 0 wherever `|b| < eps`.
    pub fn safe_div(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let eps = T::from_f64(eps);
        self.binary(
            "safe_div",
            a,
            b,
            move |x, y| if y.abs() < eps { T::zero() } else { x / y },
            Op::SafeDiv(a, b, eps),
        )
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[0] {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
        let mut out = T::zeros_vec(m * n);
        gemm(at.data(), false, bt.data(), false, &mut out, m, k, n, false);
        let value = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    /// `[p, m, k] @ [p, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 3
            || bt.rank() != 3
            || at.shape()[0] != bt.shape()[0]
            || at.shape()[2] != bt.shape()[1]
        {
            return Err(Error::shape("bmm", at.shape(), bt.shape()));
        }
        let (p, m, k, n) = (at.shape()[0], at.shape()[1], at.shape()[2], bt.shape()[2]);
        let mut out = T::zeros_vec(p * m * n);
        for i in 0..p {
            gemm(
                &at.data()[i * m * k..(i + 1) * m * k],
                false,
                &bt.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let value = Tensor::from_parts(vec![p, m, n], out);
        let rg = self.rg(&[a, b]);
        self.push("bmm", value, Op::BatchMatMul(a, b), rg)
    }

    /// Softmax over the last axis. Masked keys get weight exactly 0; a row
    /// with every key masked is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let xs = self.value(x);
        let (rows, n) = rows_of(xs.shape());
        if let Some(m) = mask {
            if m.keys != n || m.keep.len() % n != 0 || m.rows_per_group == 0 {
                return Err(Error::shape("softmax", xs.shape(), &[m.keep.len() / m.keys.max(1), m.keys]));
            }
            if rows.div_ceil(m.rows_per_group) * n > m.keep.len() {
                return Err(Error::shape("softmax", xs.shape(), &[m.keep.len() / n, n]));
            }
        }
        let mut out = T::zeros_vec(xs.numel());
        for r in 0..rows {
            let row = &xs.data()[r * n..(r + 1) * n];
            let keep = mask.map(|m| {
                let g = r / m.rows_per_group;
                &m.keep[g * n..(g + 1) * n]
            });
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut sum = T::zero();
            for j in 0..n {
                if kept(j) {
                    o[j] = (row[j] - max).exp();
                    sum = sum + o[j];
                }
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::from_parts(xs.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    /// Euclidean norm over the last axis.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let (_, c) = rows_of(xs.shape());
        let data: Vec<T> = xs
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let shape = if xs.rank() > 1 {
            xs.shape()[..xs.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        let value = Tensor::from_parts(shape, data);
        let rg = self.rg(&[x]);
        self.push("l2norm", value, Op::L2Norm(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        check_same("mse", at.shape(), bt.shape())?;
        let n = T::from_f64(at.numel() as f64);
        let s: T = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// 2-D convolution over `[b, ci, h, w]` with weights `[co, ci, k, k]`,
    /// zero padding `k / 2` and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if xs.rank() != 4
            || ws.rank() != 4
            || ws.shape()[1] != xs.shape()[1]
            || ws.shape()[2] != ws.shape()[3]
            || stride == 0
        {
            return Err(Error::shape("conv2d", xs.shape(), ws.shape()));
        }
        let [bn, ci, h, wd] = [xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]];
        let (co, k) = (ws.shape()[0], ws.shape()[2]);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        if let Some(bv) = b {
            let bs = self.value(bv);
            if bs.shape() != [co] {
                return Err(Error::shape("conv2d bias", bs.shape(), &[co]));
            }
        }
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            k,
            stride,
            ho,
            wo,
        };
        let (ckk, hw) = (ci * k * k, ho * wo);
        let ld = bn * hw;
        let mut cols = T::zeros_vec(ckk * ld);
        for i in 0..bn {
            geom.im2col(&xs.data()[i * ci * h * wd..(i + 1) * ci * h * wd], &mut cols, ld, i * hw);
        }
        let mut flat = T::zeros_vec(co * ld);
        gemm(ws.data(), false, &cols, false, &mut flat, co, ckk, ld, false);
        let bias = b.map(|bv| self.value(bv).data());
        let mut out = T::zeros_vec(bn * co * hw);
        for i in 0..bn {
            for c in 0..co {
                let src = &flat[c * ld + i * hw..c * ld + (i + 1) * hw];
                let dst = &mut out[(i * co + c) * hw..(i * co + c + 1) * hw];
                match bias {
                    Some(bd) => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bd[c]),
                    None => dst.copy_from_slice(src),
                }
            }
        }
        let value = Tensor::from_parts(vec![bn, co, ho, wo], out);
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        self.push("conv2d", value, Op::Conv2d { x, w, b, stride, cols }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[b, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 4 {
            return Err(Error::shape("upsample2x", xs.shape(), &[0, 0, 0, 0]));
        }
        let [b, c, h, w] = [xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]];
        let mut out = Vec::with_capacity(xs.numel() * 4);
        for plane in xs.data().chunks(h * w) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(plane[(y / 2) * w + xx / 2]);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out);
        let rg = self.rg(&[x]);
        self.push("upsample2x", value, Op::Upsample2x(x), rg)
    }

    /// Group normalization of `[b, c, h, w]` with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 4 || groups == 0 || xs.shape()[1] % groups != 0 {
            return Err(Error::shape("group_norm", xs.shape(), &[groups]));
        }
        let [b, c] = [xs.shape()[0], xs.shape()[1]];
        let (gs, bs) = (self.value(gamma), self.value(beta));
        if gs.shape() != [c] || bs.shape() != [c] {
            return Err(Error::shape("group_norm affine", gs.shape(), &[c]));
        }
        let hw = xs.shape()[2] * xs.shape()[3];
        let per = (c / groups) * hw;
        let eps = T::from_f64(1e-5);
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        let mut out = T::zeros_vec(xs.numel());
        for (gi, chunk) in xs.data().chunks(per).enumerate() {
            let n = T::from_f64(per as f64);
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g = gi % groups;
            let o = &mut out[gi * per..(gi + 1) * per];
            for (cj, (plane, op)) in chunk.chunks(hw).zip(o.chunks_mut(hw)).enumerate() {
                let ch = g * (c / groups) + cj;
                let a = rstd * gs.data()[ch];
                let b0 = bs.data()[ch] - mean * a;
                for (ov, &v) in op.iter_mut().zip(plane) {
                    *ov = v * a + b0;
                }
            }
        }
        let value = Tensor::from_parts(xs.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "group_norm",
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push("silu", value, Op::Silu(x), rg)
    }

    /// Concatenation along `axis`; every other axis must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Axis permutation; `perm[i]` names the input axis that becomes axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let mut seen = vec![false; xs.rank()];
        if perm.len() != xs.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", xs.shape(), perm));
        }
        let (shape, data) = permute_data(xs.data(), xs.shape(), perm);
        let rg = self.rg(&[x]);
        self.push(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute(x, perm.to_vec()),
            rg,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("transpose", self.value(x).shape(), &[2]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Row lookup `table[ids[i], :]`, giving `[ids.len(), c]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[ids.len()]));
        }
        let (v, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= v {
                return Err(Error::Domain(format!("gather_rows: index {i} out of range for {v} rows")));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), c], out),
            Op::GatherRows(table, ids.into()),
            rg,
        )
    }

    /// Zeroes every last-axis row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xs = self.value(x);
        let (rows, c) = rows_of(xs.shape());
        if keep.len() != rows {
            return Err(Error::shape("mask_rows", xs.shape(), &[keep.len()]));
        }
        let data = xs
            .data()
            .chunks(c)
            .zip(keep)
            .flat_map(|(row, &k)| row.iter().map(move |&v| if k { v } else { T::zero() }))
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            "mask_rows",
            Tensor::from_parts(xs.shape().to_vec(), data),
            Op::MaskRows(x, keep.into()),
            rg,
        )
    }

    /// Sinusoidal embedding of continuous times, `[ts.len(), dim]`.
    pub fn time_embedding(&mut self, ts: &[f64], dim: usize) -> Result<Var> {
        self.constant(sinusoidal_embedding(ts, dim))
    }

    /// Computes gradients of `loss` with respect to every leaf that requires
    /// one, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };
        if self.nodes[loss.0].requires_grad {
            let mut grads: Vec<Option<Vec<T>>> = Vec::new();
            grads.resize_with(loss.0 + 1, || None);
            grads[loss.0] = Some(vec![T::one()]);
            for i in (0..=loss.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &self.nodes[i];
                if let Op::Leaf = node.op {
                    if node.requires_grad {
                        let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                        match node.param {
                            Some((s, p)) => out.params.push((s, p, t)),
                            None => {
                                out.leaves.insert(Var(i), t);
                            }
                        }
                    }
                    continue;
                }
                self.pull(i, g, &mut grads);
            }
        }
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.consumed = true;
        Ok(out)
    }

    fn pull(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b = *b + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddConst(x) => acc(*x, g),
            Op::MulScalarVar(x, s) => {
                let c = val(*s).data()[0];
                if wants(*s) {
                    let d: T = g.iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                    acc(*s, vec![d]);
                }
                acc(*x, g.iter().map(|&v| v * c).collect());
            }
            Op::AddScalarVar(x, s) => {
                if wants(*s) {
                    acc(*s, vec![g.iter().copied().sum()]);
                }
                acc(*x, g);
            }
            Op::AddLastAxis(x, b) => {
                if wants(*b) {
                    let c = val(*b).numel();
                    let mut gb = T::zeros_vec(c);
                    for row in g.chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    acc(*b, gb);
                }
                acc(*x, g);
            }
            Op::AddChannel(x, v) => {
                if wants(*v) {
                    let s = val(*x).shape();
                    let hw = s[2] * s[3];
                    acc(*v, g.chunks(hw).map(|p| p.iter().copied().sum()).collect());
                }
                acc(*x, g);
            }
            Op::ScaleRows(x, s) => {
                let (_, c) = rows_of(val(*x).shape());
                if wants(*s) {
                    let gs = g
                        .chunks(c)
                        .zip(val(*x).data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(*s, gs);
                }
                if wants(*x) {
                    let sd = val(*s).data();
                    let gx = g
                        .chunks(c)
                        .zip(sd)
                        .flat_map(|(gr, &k)| gr.iter().map(move |&v| v * k))
                        .collect();
                    acc(*x, gx);
                }
            }
            Op::SafeDiv(a, b, eps) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let live = |y: T| y.abs() >= *eps;
                if wants(*a) {
                    acc(
                        *a,
                        g.iter()
                            .zip(bd)
                            .map(|(&gv, &y)| if live(y) { gv / y } else { T::zero() })
                            .collect(),
                    );
                }
                if wants(*b) {
                    acc(
                        *b,
                        g.iter()
                            .zip(ad.iter().zip(bd))
                            .map(|(&gv, (&x, &y))| if live(y) { -gv * x / (y * y) } else { T::zero() })
                            .collect(),
                    );
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if wants(*a) {
                    let mut ga = T::zeros_vec(m * k);
                    gemm(&g, false, bt.data(), true, &mut ga, m, n, k, false);
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = T::zeros_vec(k * n);
                    gemm(at.data(), true, &g, false, &mut gb, k, m, n, false);
                    acc(*b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (p, m, k, n) = (at.shape()[0], at.shape()[1], at.shape()[2], bt.shape()[2]);
                if wants(*a) {
                    let mut ga = T::zeros_vec(p * m * k);
                    for q in 0..p {
                        gemm(
                            &g[q * m * n..(q + 1) * m * n],
                            false,
                            &bt.data()[q * k * n..(q + 1) * k * n],
                            true,
                            &mut ga[q * m * k..(q + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                        );
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = T::zeros_vec(p * k * n);
                    for q in 0..p {
                        gemm(
                            &at.data()[q * m * k..(q + 1) * m * k],
                            true,
                            &g[q * m * n..(q + 1) * m * n],
                            false,
                            &mut gb[q * k * n..(q + 1) * k * n],
                            k,
                            m,
                            n,
                            false,
                        );
                    }
                    acc(*b, gb);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, n) = rows_of(node.value.shape());
                let mut gx = T::zeros_vec(y.len());
                for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::L2Norm(x) => {
                let xs = val(*x);
                let (_, c) = rows_of(xs.shape());
                let norms = node.value.data();
                let gx = xs
                    .data()
                    .chunks(c)
                    .zip(norms.iter().zip(&g))
                    .flat_map(|(row, (&nv, &gv))| {
                        row.iter().map(move |&v| {
                            if nv > T::zero() {
                                gv * v / nv
                            } else {
                                T::zero()
                            }
                        })
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let k = g[0] * T::from_f64(2.0 / ad.len() as f64);
                let d: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * k).collect();
                if wants(*b) {
                    acc(*b, d.iter().map(|&v| -v).collect());
                }
                acc(*a, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                acc(*x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols: saved,
            } => {
                let (xs, ws) = (val(*x), val(*w));
                let [bn, ci, h, wd] = [xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]];
                let (co, k) = (ws.shape()[0], ws.shape()[2]);
                let [ho, wo] = [node.value.shape()[2], node.value.shape()[3]];
                let (ckk, hw) = (ci * k * k, ho * wo);
                if let Some(bv) = b {
                    if wants(*bv) {
                        let mut gb = T::zeros_vec(co);
                        for (idx, plane) in g.chunks(hw).enumerate() {
                            gb[idx % co] = gb[idx % co] + plane.iter().copied().sum();
                        }
                        acc(*bv, gb);
                    }
                }
                let (want_x, want_w) = (wants(*x), wants(*w));
                if want_x || want_w {
                    let geom = ConvGeom {
                        ci,
                        h,
                        w: wd,
                        k,
                        stride: *stride,
                        ho,
                        wo,
                    };
                    let ld = bn * hw;
                    // Output gradient as a [co, bn * hw] matrix.
                    let mut gt = T::zeros_vec(co * ld);
                    for i in 0..bn {
                        for c in 0..co {
                            gt[c * ld + i * hw..c * ld + (i + 1) * hw]
                                .copy_from_slice(&g[(i * co + c) * hw..(i * co + c + 1) * hw]);
                        }
                    }
                    if want_w {
                        let mut gw = T::zeros_vec(co * ckk);
                        gemm(&gt, false, saved, true, &mut gw, co, ld, ckk, false);
                        acc(*w, gw);
                    }
                    if want_x {
                        let mut cols = T::zeros_vec(ckk * ld);
                        gemm(ws.data(), true, &gt, false, &mut cols, ckk, co, ld, false);
                        let mut gx = T::zeros_vec(xs.numel());
                        for i in 0..bn {
                            geom.col2im(&cols, ld, i * hw, &mut gx[i * ci * h * wd..(i + 1) * ci * h * wd]);
                        }
                        acc(*x, gx);
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let mut gx = T::zeros_vec(val(*x).numel());
                for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let o = &mut plane[(y / 2) * w + xx / 2];
                            *o = *o + gp[y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xs = val(*x);
                let c = xs.shape()[1];
                let hw = xs.shape()[2] * xs.shape()[3];
                let cpg = c / groups;
                let per = cpg * hw;
                let gd = val(*gamma).data();
                let mut ggamma = T::zeros_vec(c);
                let mut gbeta = T::zeros_vec(c);
                let mut gx = T::zeros_vec(xs.numel());
                let n = T::from_f64(per as f64);
                for (gi, (xc, gc)) in xs.data().chunks(per).zip(g.chunks(per)).enumerate() {
                    let grp = gi % groups;
                    let (mu, rs) = (mean[gi], rstd[gi]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for (cj, (xp, gp)) in xc.chunks(hw).zip(gc.chunks(hw)).enumerate() {
                        let ch = grp * cpg + cj;
                        let (mut sg, mut sgx) = (T::zero(), T::zero());
                        for (&xv, &gv) in xp.iter().zip(gp) {
                            sg = sg + gv;
                            sgx = sgx + gv * (xv - mu);
                        }
                        let sgx = sgx * rs;
                        ggamma[ch] = ggamma[ch] + sgx;
                        gbeta[ch] = gbeta[ch] + sg;
                        m1 = m1 + sg * gd[ch];
                        m2 = m2 + sgx * gd[ch];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    let out = &mut gx[gi * per..(gi + 1) * per];
                    for (cj, ((xp, gp), op)) in xc.chunks(hw).zip(gc.chunks(hw)).zip(out.chunks_mut(hw)).enumerate() {
                        let ch = grp * cpg + cj;
                        let a = rs * gd[ch];
                        let k = rs * m2 * rs;
                        let b0 = -rs * m1 + k * mu;
                        for ((o, &xv), &gv) in op.iter_mut().zip(xp).zip(gp) {
                            *o = a * gv - k * xv + b0;
                        }
                    }
                }
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
                acc(*x, gx);
            }
            Op::Silu(x) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = val(v).shape()[*axis] * inner;
                    if wants(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            gv.extend_from_slice(&g[start..start + chunk]);
                        }
                        acc(v, gv);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => acc(*x, g),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, gx) = permute_data(&g, node.value.shape(), &inv);
                acc(*x, gx);
            }
            Op::GatherRows(table, ids) => {
                let t = val(*table);
                let c = t.shape()[1];
                let mut gt = T::zeros_vec(t.numel());
                for (row, &id) in g.chunks(c).zip(ids.iter()) {
                    for (o, &v) in gt[id * c..(id + 1) * c].iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                acc(*table, gt);
            }
            Op::MaskRows(x, keep) => {
                let (_, c) = rows_of(node.value.shape());
                let gx = g
                    .chunks(c)
                    .zip(keep.iter())
                    .flat_map(|(row, &k)| row.iter().map(move |&v| if k { v } else { T::zero() }))
                    .collect();
                acc(*x, gx);
            }
        }
    }
}

/// `[ts.len(), dim]` sinusoidal features of `1000 * t`.
pub fn sinusoidal_embedding<T: Scalar>(ts: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let x = t * 1000.0;
        for i in 0..dim {
            let j = i % half.max(1);
            let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let v = if i < half { (x * freq).sin() } else { (x * freq).cos() };
            out.push(T::from_f64(v));
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], out)
}
