//! Variance-preserving cosine noise schedule and the deterministic DDIM
//! update together with its algebraic inverse.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Continuous-time cosine schedule: `alpha(t) = cos(c pi t / 2)`,
/// `sigma(t) = sin(c pi t / 2)`, with `t` clipped to `[floor, 1]`.
///
/// The angle scale `c` keeps `alpha(1)` away from zero; with `c = 1` a DDIM
/// step out of `t = 1` divides by `alpha(1) ~ 6e-17`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub floor: f64,
    pub angle_scale: f64,
    /// Discretization used when drawing teacher training times, `t = i / L`.
    pub train_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            floor: 1e-3,
            angle_scale: 0.96,
            train_steps: 1000,
        }
    }
}

/// A noisy latent together with its time.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub z: Tensor<f32>,
    pub t: f64,
}

impl NoiseSchedule {
    fn clip(&self, t: f64) -> f64 {
        t.clamp(self.floor, 1.0)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (FRAC_PI_2 * self.angle_scale * self.clip(t)).cos()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (FRAC_PI_2 * self.angle_scale * self.clip(t)).sin()
    }

    fn check_time(&self, t: f64, lower_open: bool) -> Result<()> {
        let ok = t.is_finite() && t <= 1.0 && if lower_open { t > 0.0 } else { t >= 0.0 };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("time {t} outside the schedule domain")))
        }
    }

    /// Time of discrete training step `i` out of `train_steps`.
    pub fn discrete_time(&self, i: usize) -> f64 {
        self.clip(i as f64 / self.train_steps as f64)
    }

    /// `alpha(t) z0 + sigma(t) eps`.
    pub fn add_noise<T: Scalar>(&self, z0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.check_time(t, true)?;
        let (a, s) = (T::from_f64(self.alpha(t)), T::from_f64(self.sigma(t)));
        z0.zip(eps, "add_noise", |x, e| a * x + s * e)
    }

    /// Deterministic DDIM update from `t_from` to `t_to < t_from`.
    pub fn ddim_step<T: Scalar>(
        &self,
        z: &Tensor<T>,
        eps_hat: &Tensor<T>,
        t_from: f64,
        t_to: f64,
    ) -> Result<Tensor<T>> {
        self.check_time(t_from, true)?;
        self.check_time(t_to, false)?;
        if t_to >= t_from {
            return Err(Error::Domain(format!(
                "ddim_step needs decreasing time, got {t_from} -> {t_to}"
            )));
        }
        let (a1, s1) = (self.alpha(t_from), self.sigma(t_from));
        let (a2, s2) = (self.alpha(t_to), self.sigma(t_to));
        let k = T::from_f64(a2 / a1);
        let s1 = T::from_f64(s1);
        let s2 = T::from_f64(s2);
        z.zip(eps_hat, "ddim_step", |zv, e| k * (zv - s1 * e) + s2 * e)
    }

    /// The noise estimate that carries `z_t` to `z_s` in one DDIM step.
    pub fn pseudo_epsilon<T: Scalar>(
        &self,
        z_t: &Tensor<T>,
        t: f64,
        z_s: &Tensor<T>,
        s: f64,
    ) -> Result<Tensor<T>> {
        self.check_time(t, true)?;
        self.check_time(s, false)?;
        if s >= t {
            return Err(Error::Domain(format!("pseudo_epsilon needs s < t, got s={s}, t={t}")));
        }
        let (at, st) = (self.alpha(t), self.sigma(t));
        let (as_, ss) = (self.alpha(s), self.sigma(s));
        let denom = ss - as_ * st / at;
        if denom.abs() < 1e-8 {
            return Err(Error::Domain(format!(
                "degenerate time pair ({t}, {s}): denominator {denom:e}"
            )));
        }
        let k = T::from_f64(as_ / at);
        let inv = T::from_f64(1.0 / denom);
        z_s.zip(z_t, "pseudo_epsilon", |zs, zt| (zs - k * zt) * inv)
    }

    /// Clean-sample estimate `(z - sigma eps) / alpha`.
    pub fn predict_x0<T: Scalar>(&self, z: &Tensor<T>, eps_hat: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let a = T::from_f64(self.alpha(t));
        let s = T::from_f64(self.sigma(t));
        z.zip(eps_hat, "predict_x0", |zv, e| (zv - s * e) / a)
    }

    /// [`Self::add_noise`] with one time per leading-axis element.
    pub fn add_noise_batch<T: Scalar>(&self, z0: &Tensor<T>, eps: &Tensor<T>, ts: &[f64]) -> Result<Tensor<T>> {
        per_item(z0, eps, ts.len(), "add_noise_batch", |i, a, b| self.add_noise(a, b, ts[i]))
    }

    /// [`Self::ddim_step`] with per-element start and end times.
    pub fn ddim_step_batch<T: Scalar>(
        &self,
        z: &Tensor<T>,
        eps_hat: &Tensor<T>,
        from: &[f64],
        to: &[f64],
    ) -> Result<Tensor<T>> {
        if from.len() != to.len() {
            return Err(Error::shape("ddim_step_batch", &[from.len()], &[to.len()]));
        }
        per_item(z, eps_hat, from.len(), "ddim_step_batch", |i, a, b| self.ddim_step(a, b, from[i], to[i]))
    }

    /// [`Self::pseudo_epsilon`] with per-element time pairs.
    pub fn pseudo_epsilon_batch<T: Scalar>(
        &self,
        z_t: &Tensor<T>,
        ts: &[f64],
        z_s: &Tensor<T>,
        ss: &[f64],
    ) -> Result<Tensor<T>> {
        if ts.len() != ss.len() {
            return Err(Error::shape("pseudo_epsilon_batch", &[ts.len()], &[ss.len()]));
        }
        per_item(z_t, z_s, ts.len(), "pseudo_epsilon_batch", |i, a, b| {
            self.pseudo_epsilon(a, ts[i], b, ss[i])
        })
    }

    /// `steps + 1` uniformly spaced times from 1 down to the floor.
    pub fn sampling_grid(&self, steps: usize) -> Vec<f64> {
        let span = 1.0 - self.floor;
        (0..=steps)
            .map(|i| {
                if i == steps {
                    self.floor
                } else {
                    1.0 - span * i as f64 / steps as f64
                }
            })
            .collect()
    }
}

/// Applies `f` to matching leading-axis slices of `a` and `b`.
fn per_item<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    n: usize,
    op: &'static str,
    f: impl Fn(usize, &Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.rank() == 0 || a.shape()[0] != n {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let inner = &a.shape()[1..];
    let mut out = Vec::with_capacity(a.numel());
    for i in 0..n {
        let ai = Tensor::new(inner, a.outer(i).to_vec())?;
        let bi = Tensor::new(inner, b.outer(i).to_vec())?;
        out.extend(f(i, &ai, &bi)?.into_data());
    }
    Tensor::new(a.shape(), out)
}
