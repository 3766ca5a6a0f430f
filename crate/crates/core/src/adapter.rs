//! Negative-prompt adapter: per-block duplicated key/value projections that
//! attend to the negative prompt, and the normalized subtraction of that
//! attention from the positive one.

use crate::autodiff::{Tape, Var};
use crate::denoiser::{attend, TeacherModel};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::prompt::{EncodedPrompts, Prompt};
use crate::tensor::{Scalar, Tensor};

/// Rows of `Z_n` with norm below this contribute nothing to the scaled term.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdapterBlock {
    pub k: Linear,
    pub v: Linear,
    pub alpha: ParamId,
    pub beta: ParamId,
}

/// Trainable parameters added on top of a frozen host.
#[derive(Clone, Debug)]
pub struct SunAdapter {
    pub store: ParamStore,
    pub blocks: Vec<AdapterBlock>,
    /// Rescale `Z_n` to the row norms of `Z_p` before subtracting.
    pub normalize: bool,
    host_arch: u64,
}

impl SunAdapter {
    /// Copies every cross-attention key/value projection of `host` and sets
    /// all scales to zero, so the adapter starts as an exact no-op.
    pub fn new(host: &TeacherModel) -> Self {
        let mut store = ParamStore::new();
        let blocks = host
            .attention
            .iter()
            .enumerate()
            .map(|(i, attn)| {
                let mut copy = |name: &str, src: ParamId| Linear {
                    weight: store.add(format!("block{i}.{name}.weight"), host.store.get(src).clone(), true),
                    bias: None,
                };
                let k = copy("k", attn.k.weight);
                let v = copy("v", attn.v.weight);
                AdapterBlock {
                    k,
                    v,
                    alpha: store.add(format!("block{i}.alpha"), Tensor::zeros(&[1]), true),
                    beta: store.add(format!("block{i}.beta"), Tensor::zeros(&[1]), true),
                }
            })
            .collect();
        Self {
            store,
            blocks,
            normalize: true,
            host_arch: host.architecture_hash(),
        }
    }

    /// Rebuilds an adapter around a loaded parameter store.
    pub(crate) fn from_parts(store: ParamStore, normalize: bool, host_arch: u64) -> Result<Self> {
        let mut blocks = Vec::new();
        while let Some(k) = store.find(&format!("block{}.k.weight", blocks.len())) {
            let i = blocks.len();
            let get = |name: &str| {
                store
                    .find(&format!("block{i}.{name}"))
                    .ok_or_else(|| Error::Format(format!("adapter is missing block{i}.{name}")))
            };
            blocks.push(AdapterBlock {
                k: Linear { weight: k, bias: None },
                v: Linear {
                    weight: get("v.weight")?,
                    bias: None,
                },
                alpha: get("alpha")?,
                beta: get("beta")?,
            });
        }
        if blocks.is_empty() || blocks.len() * 4 != store.len() {
            return Err(Error::Format("adapter store does not have the block layout".into()));
        }
        Ok(Self {
            store,
            blocks,
            normalize,
            host_arch,
        })
    }

    pub fn host_architecture(&self) -> u64 {
        self.host_arch
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn alphas(&self) -> Vec<f32> {
        self.blocks.iter().map(|b| self.store.get(b.alpha).item()).collect()
    }

    pub fn betas(&self) -> Vec<f32> {
        self.blocks.iter().map(|b| self.store.get(b.beta).item()).collect()
    }

    /// Checks that `host` has the architecture this adapter was built for,
    /// naming every mismatching projection.
    pub fn check_host(&self, host: &TeacherModel) -> Result<()> {
        let mut problems = Vec::new();
        if host.attention.len() != self.blocks.len() {
            problems.push(format!(
                "host has {} cross-attention blocks, adapter has {}",
                host.attention.len(),
                self.blocks.len()
            ));
        } else {
            for (i, (attn, blk)) in host.attention.iter().zip(&self.blocks).enumerate() {
                for (name, h, a) in [("k", attn.k.weight, blk.k.weight), ("v", attn.v.weight, blk.v.weight)] {
                    let (hs, ad) = (host.store.get(h).shape(), self.store.get(a).shape());
                    if hs != ad {
                        problems.push(format!("block {i} {name}: host {hs:?}, adapter {ad:?}"));
                    }
                }
            }
        }
        if problems.is_empty() && host.architecture_hash() != self.host_arch {
            problems.push(format!(
                "host architecture {:016x}, adapter expects {:016x}",
                host.architecture_hash(),
                self.host_arch
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(problems.join("; ")))
        }
    }
}

/// `g = alpha * Z_n * (|Z_p|_row / |Z_n|_row) + beta`; without
/// normalization the ratio is dropped. Rows with `|Z_n| < 1e-8` get a zero
/// scaled term, leaving only `beta`.
pub fn attention_normalize<T: Scalar>(
    tape: &mut Tape<T>,
    zp: Var,
    zn: Var,
    alpha: Var,
    beta: Var,
    normalize: bool,
) -> Result<Var> {
    if tape.shape(zp) != tape.shape(zn) {
        return Err(Error::shape("attention_normalize", tape.shape(zp), tape.shape(zn)));
    }
    let scaled = if normalize {
        let np = tape.l2norm(zp)?;
        let nn = tape.l2norm(zn)?;
        let ratio = tape.safe_div(np, nn, DEGENERATE_NORM)?;
        tape.scale_rows(zn, ratio)?
    } else {
        zn
    };
    let scaled = tape.mul_scalar_var(scaled, alpha)?;
    tape.add_scalar_var(scaled, beta)
}

/// `Z = Z_p - g`.
pub fn combine_features<T: Scalar>(tape: &mut Tape<T>, zp: Var, g: Var) -> Result<Var> {
    tape.sub(zp, g)
}

/// The adapter together with the encoded negative prompts for one forward.
pub struct NegativeBranch<'a> {
    pub adapter: &'a SunAdapter,
    pub prompts: EncodedPrompts,
}

impl NegativeBranch<'_> {
    /// Replaces the positive attention output `zp` of cross-attention block
    /// `block` (queries `q`) with the adapted feature.
    pub(crate) fn combine<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        block: usize,
        q: Var,
        zp: Var,
        heads: usize,
    ) -> Result<Var> {
        let blk = self
            .adapter
            .blocks
            .get(block)
            .ok_or_else(|| Error::Incompatible(format!("adapter has no block {block}")))?;
        let store = &self.adapter.store;
        let zn = attend(tape, store, &blk.k, &blk.v, q, &self.prompts, heads)?;
        let alpha = tape.param(store, blk.alpha)?;
        let beta = tape.param(store, blk.beta)?;
        let g = attention_normalize(tape, zp, zn, alpha, beta, self.adapter.normalize)?;
        combine_features(tape, zp, g)
    }
}

/// A frozen host with an adapter plugged in.
#[derive(Clone, Copy, Debug)]
pub struct StudentModel<'a> {
    pub host: &'a TeacherModel,
    pub adapter: &'a SunAdapter,
}

/// Plugs `adapter` into `host` after checking compatibility.
pub fn plug_into<'a>(adapter: &'a SunAdapter, host: &'a TeacherModel) -> Result<StudentModel<'a>> {
    adapter.check_host(host)?;
    Ok(StudentModel { host, adapter })
}

impl StudentModel<'_> {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        z: Var,
        ts: &[f64],
        positive: &[Prompt],
        negative: &[Prompt],
    ) -> Result<Var> {
        let pos = self.host.encode(tape, positive)?;
        let neg = self.host.encode(tape, negative)?;
        let branch = NegativeBranch {
            adapter: self.adapter,
            prompts: neg,
        };
        self.host.forward(tape, z, ts, &pos, Some(&branch))
    }

    /// One network evaluation per batch element.
    pub fn predict(&self, z: &Tensor<f32>, ts: &[f64], positive: &[Prompt], negative: &[Prompt]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let zv = tape.constant(z.clone())?;
        let out = self.forward(&mut tape, zv, ts, positive, negative)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetConfig;
    use crate::rng::{normal_tensor, stream};

    fn host(seed: u64) -> TeacherModel {
        let mut t = TeacherModel::new(UNetConfig::tiny(), seed);
        let id = t.store.find("out.conv.weight").unwrap();
        let shape = t.store.get(id).shape().to_vec();
        *t.store.get_mut(id) = normal_tensor(&mut stream(seed, "adapter-test", 0), &shape).map(|v| 0.1 * v);
        t.freeze();
        t
    }

    fn inputs(b: usize) -> (Tensor<f32>, Vec<f64>, Vec<Prompt>, Vec<Prompt>) {
        let z = normal_tensor(&mut stream(3, "adapter-z", 0), &[b, 1, 16, 16]);
        let ts = (0..b).map(|i| 0.2 + 0.15 * i as f64).collect();
        let pos = vec![Prompt::parse("circle bright").unwrap(); b];
        let neg = vec![Prompt::parse("blur speckle").unwrap(); b];
        (z, ts, pos, neg)
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let t = host(1);
        let a = SunAdapter::new(&t);
        let (z, ts, pos, neg) = inputs(3);
        let student = plug_into(&a, &t).unwrap().predict(&z, &ts, &pos, &neg).unwrap();
        let teacher = t.predict(&z, &ts, &pos).unwrap();
        assert_eq!(student.data(), teacher.data());
        assert!(a.alphas().iter().chain(&a.betas()).all(|&g| g == 0.0));
    }

    #[test]
    fn nonzero_gain_changes_output() {
        let t = host(1);
        let mut a = SunAdapter::new(&t);
        let id = a.blocks[0].alpha;
        *a.store.get_mut(id) = Tensor::full(&[1], 0.5);
        let (z, ts, pos, neg) = inputs(2);
        let student = plug_into(&a, &t).unwrap().predict(&z, &ts, &pos, &neg).unwrap();
        let teacher = t.predict(&z, &ts, &pos).unwrap();
        assert!(student.mse(&teacher).unwrap() > 0.0);
    }

    #[test]
    fn parameter_count_is_two_projections_and_two_gains_per_block() {
        let t = host(2);
        let a = SunAdapter::new(&t);
        let expected: usize = t
            .attention
            .iter()
            .map(|at| t.store.get(at.k.weight).numel() + t.store.get(at.v.weight).numel() + 2)
            .sum();
        assert_eq!(a.num_params(), expected);
        assert_eq!(a.blocks.len(), t.attention.len());
    }

    #[test]
    fn normalized_term_ignores_negative_scale() {
        let mut rng = stream(5, "adapter-norm", 0);
        let zp = normal_tensor(&mut rng, &[6, 8]).cast::<f64>();
        let zn = normal_tensor(&mut rng, &[6, 8]).cast::<f64>();
        let g = |c: f64| {
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(zp.clone()).unwrap();
            let n = tape.constant(zn.map(|v| c * v)).unwrap();
            let a = tape.constant(Tensor::full(&[1], 0.7)).unwrap();
            let b = tape.constant(Tensor::full(&[1], -0.2)).unwrap();
            let out = attention_normalize(&mut tape, p, n, a, b, true).unwrap();
            tape.value(out).clone()
        };
        let base = g(1.0);
        for c in [1e-3, 1e3] {
            for (x, y) in g(c).data().iter().zip(base.data()) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn degenerate_negative_rows_leave_only_the_offset() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[2, 3], 1.0)).unwrap();
        let n = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let a = tape.constant(Tensor::full(&[1], 2.0)).unwrap();
        let b = tape.constant(Tensor::full(&[1], 0.25)).unwrap();
        let g = attention_normalize(&mut tape, p, n, a, b, true).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.25));
        let z = combine_features(&mut tape, p, g).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn mismatched_host_is_rejected() {
        let a = SunAdapter::new(&host(1));
        let other = TeacherModel::new(UNetConfig::compact(), 1);
        match plug_into(&a, &other) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("architecture") || msg.contains("block")),
            other => panic!("expected incompatibility, got {:?}", other.map(|_| ())),
        }
        // Same architecture, different weights: accepted.
        assert!(plug_into(&a, &host(9)).is_ok());
    }

    #[test]
    fn rebuild_requires_full_block_layout() {
        let a = SunAdapter::new(&host(1));
        let back = SunAdapter::from_parts(a.store.clone(), true, a.host_architecture()).unwrap();
        assert_eq!(back.blocks.len(), a.blocks.len());
        let mut partial = ParamStore::new();
        partial.add("block0.k.weight", Tensor::zeros(&[2, 2]), true);
        assert!(matches!(SunAdapter::from_parts(partial, true, 0), Err(Error::Format(_))));
    }
}
