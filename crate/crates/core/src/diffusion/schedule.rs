use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::invalid("schedule", format!("unknown kind {s:?} (cosine|linear)"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Betas for `t = 1..=T` and cumulative products `alpha_bar_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "need at least one diffusion step"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: usize| (((t as f64 / steps as f64) + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
                (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(0.999)).collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                        (lo + frac * (hi - lo)).min(0.999)
                    })
                    .collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        let mut full = vec![0.0];
        full.extend(betas);
        Ok(Self {
            kind,
            betas: full,
            alpha_bars,
        })
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, steps)
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Linear, steps)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub(crate) fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::Timestep {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.betas[t])
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(self.alpha_bars[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(t)?;
        x0.zip_map(noise, "q_sample", |x, n| T::lit(ab.sqrt()) * x + T::lit((1.0 - ab).sqrt()) * n)
    }

    /// Recovers `x0` from `x_t` and predicted noise.
    pub fn eps_to_x0<T: Scalar>(&self, x_t: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt().max(1e-12), (1.0 - ab).sqrt());
        x_t.zip_map(eps, "eps_to_x0", |x, e| T::lit(1.0 / a) * (x - T::lit(b) * e))
    }

    /// Recovers the noise from `x_t` and predicted `x0`.
    pub fn x0_to_eps<T: Scalar>(&self, x_t: &Tensor<T>, t: usize, x0: &Tensor<T>) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt().max(1e-12));
        x_t.zip_map(x0, "x0_to_eps", |x, x0| T::lit(1.0 / b) * (x - T::lit(a) * x0))
    }

    /// DDIM noise scale for the jump `t -> t_prev`.
    pub fn sigma(&self, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
        check_eta(eta)?;
        self.check(t, 1)?;
        if t_prev >= t {
            return Err(Error::invalid("sigma", format!("t_prev {t_prev} must be below t {t}")));
        }
        let (ab, abp) = (self.alpha_bars[t], self.alpha_bars[t_prev]);
        Ok(eta * ((1.0 - abp) / (1.0 - ab)).sqrt() * (1.0 - ab / abp).max(0.0).sqrt())
    }

    /// Posterior standard deviation `sqrt(beta_tilde_t)` of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_std(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        let (ab, abp) = (self.alpha_bars[t], self.alpha_bars[t - 1]);
        Ok(((1.0 - abp) / (1.0 - ab) * self.betas[t]).sqrt())
    }

    /// One DDIM update `x_t -> x_{t-1}` from predicted noise.
    pub fn ddim_step<T: Scalar>(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
        eta: f64,
        noise: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check(t, 1)?;
        let x0 = self.eps_to_x0(x_t, t, eps)?;
        self.ddim_step_to(&x0, eps, t, t - 1, eta, Some(noise))
    }

    /// Strided DDIM update to `t_prev` from a consistent `(x0, eps)` pair.
    /// `noise` may be omitted only when `eta == 0`.
    pub fn ddim_step_to<T: Scalar>(
        &self,
        x0: &Tensor<T>,
        eps: &Tensor<T>,
        t: usize,
        t_prev: usize,
        eta: f64,
        noise: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let sigma = self.sigma(t, t_prev, eta)?;
        let abp = self.alpha_bars[t_prev];
        let dir = (1.0 - abp - sigma * sigma).max(0.0).sqrt();
        let mut out = x0.zip_map(eps, "ddim_step", |x, e| T::lit(abp.sqrt()) * x + T::lit(dir) * e)?;
        if sigma > 0.0 {
            let noise = noise.ok_or_else(|| Error::invalid("ddim_step", "eta > 0 requires noise"))?;
            out.axpy(T::lit(sigma), noise)?;
        }
        Ok(out)
    }

    /// Uniform training timesteps in `1..=T`.
    pub fn sample_timesteps(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(1..=self.steps())).collect()
    }
}

pub(crate) fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid("ddim", format!("eta {eta} outside [0, 1]")));
    }
    Ok(())
}
