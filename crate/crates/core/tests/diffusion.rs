use proptest::prelude::*;
use rand::Rng as _;
use unclip::diffusion::{
    ddim_invert, sample_loop, strided_timesteps, NoiseSchedule, Prediction, SampleOptions, ScheduleKind,
};
use unclip::numerics::Tensor;
use unclip::rng;

fn t64(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[v.len()], v).unwrap()
}

/// Independent products of (1 - beta).
fn oracle_alpha_bars(s: &NoiseSchedule) -> Vec<f64> {
    let mut out = vec![1.0];
    for b in s.betas() {
        out.push(out.last().unwrap() * (1.0 - b));
    }
    out
}

#[test]
fn cosine_matches_closed_form_before_clipping() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let f = |t: f64| (((t / 100.0) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    for t in 1..=90 {
        let want = f(t as f64) / f(0.0);
        assert!((s.alpha_bar(t).unwrap() - want).abs() < 1e-12, "t={t}");
    }
}

#[test]
fn sigma_eta_one_is_posterior_std() {
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let s = NoiseSchedule::new(kind, 100).unwrap();
        let ab = oracle_alpha_bars(&s);
        for t in 1..=100 {
            let beta_tilde = s.betas()[t - 1] * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
            let sig = s.sigma(t, t - 1, 1.0).unwrap();
            assert!((sig - beta_tilde.sqrt()).abs() <= 1e-6, "{kind} t={t}: {sig} vs {}", beta_tilde.sqrt());
        }
    }
}

#[test]
fn q_sample_edges_and_moments() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let x0 = t64(&[0.7, -0.3]);
    let noise = t64(&[1.0, 2.0]);
    assert_eq!(s.q_sample(&x0, 0, &noise).unwrap(), x0);
    let zero = Tensor::zeros(&[2]);
    let scaled = s.q_sample(&x0, 40, &zero).unwrap();
    let a = s.alpha_bar(40).unwrap().sqrt();
    assert!((scaled.data()[0] - a * 0.7).abs() < 1e-15);

    let n = 100_000;
    let mut r = rng::stream(0, "mc");
    let t = 30;
    let draws = rng::normal::<f64>(&[n], &mut r);
    let x0 = Tensor::full(&[n], 0.8);
    let xs = s.q_sample(&x0, t, &draws).unwrap();
    let ab = s.alpha_bar(t).unwrap();
    let mean = xs.mean();
    let var = xs.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (m_want, v_want) = (ab.sqrt() * 0.8, 1.0 - ab);
    assert!((mean - m_want).abs() < 3.0 * (v_want / n as f64).sqrt());
    assert!((var - v_want).abs() < 3.0 * v_want * (2.0 / (n - 1) as f64).sqrt());
}

#[test]
fn conversions_invert_everywhere() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let mut r = rng::stream(1, "conv");
    for t in 1..=100 {
        let x0 = rng::normal::<f32>(&[16], &mut r);
        let eps = rng::normal::<f32>(&[16], &mut r);
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let back = s.x0_to_eps(&xt, t, &s.eps_to_x0(&xt, t, &eps).unwrap()).unwrap();
        assert!(back.sub(&eps).unwrap().max_abs() < 1e-5, "t={t}");
        let x0r = s.eps_to_x0(&xt, t, &eps).unwrap();
        // Dividing by sqrt(alpha_bar) amplifies float error near t = T.
        let tol = 1e-5 / s.alpha_bar(t).unwrap().sqrt() as f32;
        assert!(x0r.sub(&x0).unwrap().max_abs() < tol.max(1e-5), "t={t}");
        assert!(x0r.is_finite());
    }
}

#[test]
fn ddim_step_properties() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let mut r = rng::stream(2, "step");
    let x0 = rng::normal::<f64>(&[8], &mut r);
    let eps = rng::normal::<f64>(&[8], &mut r);
    let n1 = rng::normal::<f64>(&[8], &mut r);
    let n2 = rng::normal::<f64>(&[8], &mut r);
    for t in [1, 2, 50, 100] {
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let a = s.ddim_step(&xt, t, &eps, 0.0, &n1).unwrap();
        let b = s.ddim_step(&xt, t, &eps, 0.0, &n2).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        let want = s.q_sample(&x0, t - 1, &eps).unwrap();
        assert!(a.sub(&want).unwrap().max_abs() < 1e-9, "t={t}");
        if t > 1 {
            assert_ne!(s.ddim_step(&xt, t, &eps, 0.5, &n1).unwrap(), a);
        }
    }
    assert!(s.ddim_step(&x0, 3, &eps, 1.5, &n1).is_err());
    assert!(s.ddim_step(&x0, 0, &eps, 0.0, &n1).is_err());
}

#[test]
fn zero_eps_inversion_keeps_x0_fixed() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let zero = |x: &Tensor<f64>, _t: usize| Ok(Prediction::Eps(Tensor::zeros(x.shape())));
    let x0 = t64(&[0.5, -1.0, 0.25]);
    for steps in [1, 10, 100] {
        let xt = ddim_invert(&s, &zero, &x0, steps).unwrap();
        let ab = s.alpha_bar(100).unwrap().sqrt();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - ab * b).abs() < 1e-12);
        }
        let opts = SampleOptions { steps, eta: 0.0, clip: None };
        let back = sample_loop(&s, &zero, xt, &opts, &mut rng::stream(0, "x")).unwrap();
        assert!(back.sub(&x0).unwrap().max_abs() < 1e-9);
    }
}

/// Posterior-mean noise predictor for data distributed as N(mu, s^2).
fn gaussian_denoiser(s: &NoiseSchedule, mu: f64, sd: f64) -> impl Fn(&Tensor<f64>, usize) -> unclip::Result<Prediction<f64>> + '_ {
    move |x: &Tensor<f64>, t: usize| {
        let ab = s.alpha_bar(t)?;
        let var = ab * sd * sd + 1.0 - ab;
        Ok(Prediction::Eps(x.map(|v| (1.0 - ab).sqrt() * (v - ab.sqrt() * mu) / var)))
    }
}

fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn full_eta_one_chain_matches_ancestral_sampling() {
    let s = NoiseSchedule::cosine(100).unwrap();
    let (mu, sd) = (0.6, 0.3);
    let model = gaussian_denoiser(&s, mu, sd);
    let n = 10_000;
    let mut r = rng::stream(5, "ddim");
    let opts = SampleOptions {
        steps: 100,
        eta: 1.0,
        clip: None,
    };
    let ddim = unclip::diffusion::sample(&s, &model, &[n], &opts, &mut r).unwrap();

    // Reference: x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t) + sqrt(beta_tilde) z.
    let ab = oracle_alpha_bars(&s);
    let mut r2 = rng::stream(6, "ddpm");
    let mut x: Vec<f64> = (0..n).map(|_| r2.sample(rand_distr::StandardNormal)).collect();
    for t in (1..=100).rev() {
        let beta = s.betas()[t - 1];
        let var = ab[t] * sd * sd + 1.0 - ab[t];
        let post = (beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])).sqrt();
        for v in &mut x {
            let eps = (1.0 - ab[t]).sqrt() * (*v - ab[t].sqrt() * mu) / var;
            let z: f64 = if t > 1 { r2.sample(rand_distr::StandardNormal) } else { 0.0 };
            *v = (*v - beta / (1.0 - ab[t]).sqrt() * eps) / (1.0 - beta).sqrt() + post * z;
        }
    }
    let d = ks_statistic(ddim.data().to_vec(), x);
    // Critical value at alpha = 0.001 for two samples of 10^4.
    let crit = 1.95 * (2.0 / n as f64).sqrt();
    assert!(d < crit, "KS {d} >= {crit}");
}

#[test]
fn sampling_is_seed_deterministic() {
    let s = NoiseSchedule::linear(50).unwrap();
    let model = gaussian_denoiser(&s, 0.0, 0.5);
    let opts = SampleOptions {
        steps: 10,
        eta: 0.7,
        clip: Some(1.0),
    };
    let a = unclip::diffusion::sample(&s, &model, &[64], &opts, &mut rng::stream(1, "s")).unwrap();
    let b = unclip::diffusion::sample(&s, &model, &[64], &opts, &mut rng::stream(1, "s")).unwrap();
    assert_eq!(a, b);
    assert!(a.max_abs() <= 1.0);
    let too_many = SampleOptions { steps: 51, ..opts };
    assert!(unclip::diffusion::sample(&s, &model, &[4], &too_many, &mut rng::stream(1, "s")).is_err());
}

proptest! {
    #[test]
    fn conversions_are_inverse_pairs(t in 1usize..=100, vals in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let s = NoiseSchedule::cosine(100).unwrap();
        let xt = t64(&vals);
        let e: Vec<f64> = vals.iter().map(|v| v * 0.5 - 0.1).collect();
        let e = t64(&e);
        let back = s.x0_to_eps(&xt, t, &s.eps_to_x0(&xt, t, &e).unwrap()).unwrap();
        prop_assert!(back.sub(&e).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn strides_are_valid(total in 1usize..300, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let ts = strided_timesteps(total, steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(ts[0], total);
        prop_assert!(steps == 1 || *ts.last().unwrap() == 1);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}
