use crate::diffusion::schedule::{check_eta, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng::{self, Rng};

/// Network output in either parameterization.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction<T> {
    Eps(Tensor<T>),
    X0(Tensor<T>),
}

impl<T: Scalar> Prediction<T> {
    /// `(x0, eps)` consistent with `x_t` at step `t`.
    pub fn resolve(self, schedule: &NoiseSchedule, x_t: &Tensor<T>, t: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        match self {
            Prediction::Eps(e) => Ok((schedule.eps_to_x0(x_t, t, &e)?, e)),
            Prediction::X0(x0) => {
                let e = schedule.x0_to_eps(x_t, t, &x0)?;
                Ok((x0, e))
            }
        }
    }
}

/// A denoising model evaluated on a batch `x_t` at timestep `t`.
pub trait Denoise<T> {
    fn predict(&self, x_t: &Tensor<T>, t: usize) -> Result<Prediction<T>>;
}

impl<T, F> Denoise<T> for F
where
    F: Fn(&Tensor<T>, usize) -> Result<Prediction<T>>,
{
    fn predict(&self, x_t: &Tensor<T>, t: usize) -> Result<Prediction<T>> {
        self(x_t, t)
    }
}

/// `uncond + scale (cond - uncond)`.
pub fn cfg_combine<T: Scalar>(uncond: &Tensor<T>, cond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::invalid("cfg_combine", format!("guidance scale {scale} must be >= 0")));
    }
    if uncond.shape() != cond.shape() {
        return Err(Error::shape("cfg_combine", uncond.shape(), cond.shape()));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let s = T::lit(scale);
    uncond.zip_map(cond, "cfg_combine", |u, c| u + s * (c - u))
}

/// Classifier-free guidance over a conditional and an unconditional model.
/// Both must use the same parameterization.
pub struct Guided<'a, T> {
    pub cond: &'a dyn Denoise<T>,
    pub uncond: &'a dyn Denoise<T>,
    pub scale: f64,
}

impl<T: Scalar> Denoise<T> for Guided<'_, T> {
    fn predict(&self, x_t: &Tensor<T>, t: usize) -> Result<Prediction<T>> {
        let c = self.cond.predict(x_t, t)?;
        if self.scale == 1.0 {
            return Ok(c);
        }
        match (self.uncond.predict(x_t, t)?, c) {
            (Prediction::Eps(u), Prediction::Eps(c)) => Ok(Prediction::Eps(cfg_combine(&u, &c, self.scale)?)),
            (Prediction::X0(u), Prediction::X0(c)) => Ok(Prediction::X0(cfg_combine(&u, &c, self.scale)?)),
            _ => Err(Error::invalid("guidance", "mixed prediction types")),
        }
    }
}

/// Evenly spaced timesteps from `T` down to 1, both included.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid("strided_timesteps", format!("{steps} steps for T={total}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps).rev().map(|i| (1.0 + i as f64 * span).round() as usize).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub eta: f64,
    /// Clamp each predicted `x0` (and the output) to `[-c, c]`.
    pub clip: Option<f64>,
}

/// Runs the strided DDIM chain from `x_init` (noise at `t = T`) down to `t = 0`.
pub fn sample_loop<T: Scalar, D: Denoise<T> + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    x_init: Tensor<T>,
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    check_eta(opts.eta)?;
    let ts = strided_timesteps(schedule.steps(), opts.steps)?;
    let mut x = x_init;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let (mut x0, mut eps) = model.predict(&x, t)?.resolve(schedule, &x, t)?;
        if let Some(c) = opts.clip {
            x0 = x0.clamp(T::lit(-c), T::lit(c));
            eps = schedule.x0_to_eps(&x, t, &x0)?;
        }
        let noise = (opts.eta > 0.0 && t_prev > 0).then(|| rng::normal(x.shape(), rng));
        x = schedule.ddim_step_to(&x0, &eps, t, t_prev, opts.eta, noise.as_ref())?;
    }
    if let Some(c) = opts.clip {
        x = x.clamp(T::lit(-c), T::lit(c));
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, I)` from `rng`, then runs [`sample_loop`].
pub fn sample<T: Scalar, D: Denoise<T> + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    shape: &[usize],
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let x_init = rng::normal(shape, rng);
    sample_loop(schedule, model, x_init, opts, rng)
}

/// Deterministic DDIM inversion: runs the `eta = 0` update upward through the
/// same strided timesteps the sampler uses, returning the latent at `t = T`.
pub fn ddim_invert<T: Scalar, D: Denoise<T> + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    x0: &Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    let mut ts = strided_timesteps(schedule.steps(), steps)?;
    ts.reverse();
    let mut x = x0.clone();
    let mut t_cur = 0;
    for &t_next in &ts {
        let (_, eps) = model.predict(&x, t_next)?.resolve(schedule, &x, t_next)?;
        let x0_hat = schedule.eps_to_x0(&x, t_cur, &eps)?;
        let ab = schedule.alpha_bar(t_next)?;
        x = x0_hat.zip_map(&eps, "ddim_invert", |a, e| T::lit(ab.sqrt()) * a + T::lit((1.0 - ab).sqrt()) * e)?;
        t_cur = t_next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_include_endpoints() {
        assert_eq!(strided_timesteps(100, 100).unwrap(), (1..=100).rev().collect::<Vec<_>>());
        let s = strided_timesteps(100, 7).unwrap();
        assert_eq!((s[0], s[6]), (100, 1));
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert!(strided_timesteps(10, 11).is_err());
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let c = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        assert_eq!(cfg_combine(&u, &c, 2.0).unwrap().data(), &[2.0]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert!(cfg_combine(&u, &c, -1.0).is_err());
    }
}
