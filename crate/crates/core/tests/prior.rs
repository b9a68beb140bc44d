use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use unclip::clip::{ClipConfig, ClipModel};
use unclip::data::{generate_dataset, CaptionTokens};
use unclip::numerics::{Graph, Tensor};
use unclip::nn::Ctx;
use unclip::prior::*;
use unclip::rng;
use unclip::train::OptimConfig;

fn gaussian(n: usize, stds: &[f64], seed: u64) -> Tensor<f64> {
    let d = stds.len();
    let z = rng::normal::<f64>(&[n, d], &mut rng::stream(seed, "pca"));
    let data = z.data().iter().enumerate().map(|(i, v)| v * stds[i % d] + 0.3).collect();
    Tensor::new(&[n, d], data).unwrap()
}

fn oracle_eigenvalues(x: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = c.transpose() * &c / n as f64;
    let mut v: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn pca_matches_covariance_eigensolve() {
    let x = gaussian(2000, &[3.0, 0.5, 2.0, 1.0, 0.1, 1.5], 1);
    let basis = fit_pca(&x, 0.0).unwrap();
    let oracle = oracle_eigenvalues(&x);
    assert_eq!(basis.rank(), 6);
    for (a, b) in basis.eigenvalues.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6 * b.max(1.0), "{a} vs {b}");
    }
    assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    let c = &basis.components;
    let cct = c.matmul(&c.t().unwrap()).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((cct.data()[i * 6 + j] - want).abs() < 1e-4);
        }
    }
}

#[test]
fn pca_reconstruction_properties() {
    let x = gaussian(500, &[2.0, 1.0, 0.7, 0.3, 0.2, 0.1, 0.05, 0.01], 2).cast::<f32>();
    let basis = fit_pca(&x, 0.0).unwrap();
    let d = 8;
    let full = basis.reconstruct_raw(&basis.project(&x, d).unwrap()).unwrap();
    assert!(full.sub(&x).unwrap().max_abs() < 1e-5);
    let mses: Vec<f64> = (1..=d).map(|k| basis.reconstruction_mse(&x, k).unwrap()).collect();
    assert!(mses.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{mses:?}");
    assert!(basis.project(&x, 0).is_err());
    assert!(basis.project(&x, d + 1).is_err());

    let unit = x.normalized_rows();
    let b2 = fit_pca(&unit, 0.0).unwrap();
    let rec = |k| b2.reconstruct(&b2.project(&unit, k).unwrap()).unwrap();
    let (r1, rk) = (rec(1), rec(d));
    for i in 0..unit.shape()[0] {
        let u = unit.index0(i);
        let (c1, ck) = (u.dot(&r1.index0(i)), u.dot(&rk.index0(i)));
        assert!((rk.index0(i).norm() - 1.0).abs() < 1e-5);
        assert!(ck >= 1.0 - 1e-5 && c1 <= ck + 1e-6);
    }
}

#[test]
fn pca_one_percent_rule_and_rank_cap() {
    let stds = [3.0, 1.0, 0.5, 0.1, 0.01];
    let x = gaussian(4000, &stds, 3);
    let basis = fit_pca(&x, 0.01).unwrap();
    let total = basis.total_variance();
    let k = basis.k;
    assert!(basis.reconstruction_mse(&x, k).unwrap() < 0.01 * total);
    assert!(basis.reconstruction_mse(&x, k - 1).unwrap() >= 0.01 * total);

    // Rank 2 data embedded in 4 dimensions.
    let z = gaussian(300, &[1.0, 2.0], 4);
    let mut data = Vec::new();
    for r in z.data().chunks(2) {
        data.extend_from_slice(&[r[0], r[1], r[0] + r[1], 0.0]);
    }
    let b = fit_pca(&Tensor::new(&[300, 4], data).unwrap(), 0.0).unwrap();
    assert_eq!(b.rank(), 2);
    assert!(b.k <= 2);
    assert!(fit_pca(&gaussian(3, &[1.0; 4], 5), 0.01).is_err());
}

#[test]
fn quantizer_round_trip_bound() {
    let mut r = rng::stream(0, "q");
    let q = QuantizerSpec::new(64, vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 9.0]).unwrap();
    for _ in 0..100_000 {
        let v: Vec<f64> = (0..3).map(|j| q.mins[j] + r.random::<f64>() * (q.maxs[j] - q.mins[j])).collect();
        let back = q.dequantize(&q.quantize(&v).unwrap()).unwrap();
        for j in 0..3 {
            assert!((back[j] - v[j]).abs() <= 0.5 * q.width(j) + 1e-12);
        }
    }
    let centers = q.dequantize(&[5, 17, 63]).unwrap();
    assert_eq!(q.dequantize(&q.quantize(&centers).unwrap()).unwrap(), centers);
    assert_eq!(q.quantize(&[5.0, -3.0, 100.0]).unwrap(), vec![63, 0, 63]);
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    rng::normal::<f32>(&[n, d], &mut rng::stream(seed, "rows")).normalized_rows()
}

fn pairs(n: usize, d: usize) -> PairedEmbeddings {
    let image = unit_rows(n, d, 10);
    let noise = unit_rows(n, d, 11);
    let text = image.scale(0.8).add(&noise.scale(0.6)).unwrap().normalized_rows();
    PairedEmbeddings { image, text }
}

fn small_ar() -> ArPriorConfig {
    ArPriorConfig {
        width: 32,
        depth: 2,
        heads: 4,
        mse_fraction: 0.05,
        ..ArPriorConfig::default()
    }
}

fn captions(n: usize) -> Vec<CaptionTokens> {
    generate_dataset(n, 3).into_iter().map(|r| r.caption).collect()
}

#[test]
fn ar_prior_bookkeeping_and_init_loss() {
    let p = pairs(200, 16);
    let model = ArPriorModel::new(small_ar(), &p, 0).unwrap();
    let k = model.k();
    assert!(k < 16);
    assert_eq!(model.sequence_len(), PREFIX_LEN + k);
    let codes = model.encode(&p.image.narrow0(0, 8)).unwrap();
    assert!(codes.iter().all(|c| c.len() == k && c.iter().all(|&v| v < 64)));
    let dots: Vec<usize> = p.dots()[..8].iter().map(|&v| model.dot_token(v)).collect();
    let g = Graph::new();
    let loss = model
        .loss(Ctx::new(&g, &model.store), &captions(8), &p.text.narrow0(0, 8), &dots, &codes)
        .unwrap();
    assert!((loss.value().item() as f64 - (64f64).ln()).abs() < 1e-4);
}

#[test]
fn ar_prior_is_causal() {
    let p = pairs(200, 16);
    let mut model = ArPriorModel::new(small_ar(), &p, 0).unwrap();
    let mut r = rng::stream(1, "perturb");
    for v in model.store.values_mut() {
        for x in v.data_mut() {
            *x += 0.05 * (r.random::<f32>() - 0.5);
        }
    }
    let k = model.k();
    let caps = captions(2);
    let zt = p.text.narrow0(0, 2);
    let codes = model.encode(&p.image.narrow0(0, 2)).unwrap();
    let run = |codes: &[Vec<usize>]| {
        let g = Graph::inference();
        let out = model.forward(Ctx::new(&g, &model.store), &caps, &zt, &[3, 40], codes).unwrap();
        (*out.value()).clone()
    };
    let base = run(&codes);
    assert_eq!(base.shape(), [2, k, 64]);
    let j = k / 2;
    let mut changed = codes.clone();
    for row in &mut changed {
        row[j] = (row[j] + 7) % 64;
    }
    let after = run(&changed);
    let per = 64;
    for b in 0..2 {
        for m in 0..k {
            let s = (b * k + m) * per;
            let diff = base.data()[s..s + per].iter().zip(&after.data()[s..s + per]).map(|(a, c)| (a - c).abs()).fold(0.0, f32::max);
            if m <= j {
                assert_eq!(diff, 0.0, "output {m} saw code {j}");
            } else if m == j + 1 {
                assert!(diff > 0.0);
            }
        }
    }
}

#[test]
fn ar_prior_sampling() {
    let p = pairs(400, 16);
    let model = ArPriorModel::new(small_ar(), &p, 0).unwrap();
    let median = model.dot_token(model.dot_median());
    let mut r = rng::stream(2, "dot");
    for _ in 0..2000 {
        assert!(model.sample_dot_token(&mut r) >= median);
    }
    let caps = captions(3);
    let zt = p.text.narrow0(0, 3);
    let opts = ArSampleOptions { temperature: 0.0, guidance: 1.0 };
    let a = model.sample(&caps, &zt, &opts, &mut rng::stream(5, "s")).unwrap();
    let b = model.sample(&caps, &zt, &opts, &mut rng::stream(5, "s")).unwrap();
    assert_eq!(a, b);
    for i in 0..3 {
        assert!((a.index0(i).norm() - 1.0).abs() < 1e-5);
    }
    let guided = ArSampleOptions { temperature: 1.0, guidance: 2.0 };
    assert!(model.sample(&caps, &zt, &guided, &mut rng::stream(6, "s")).unwrap().is_finite());
}

#[test]
fn embedding_scale_matches_target_variance() {
    let z = unit_rows(1000, 16, 7);
    let target = 0.37;
    let s = embedding_scale(&z, target).unwrap();
    let scaled: Vec<f64> = z.data().iter().map(|&v| v as f64 * s).collect();
    let mut var = 0.0;
    for j in 0..16 {
        let col: Vec<f64> = scaled.iter().skip(j).step_by(16).copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        var += col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64 / 16.0;
    }
    assert!((var / target - 1.0).abs() < 0.02, "{var}");
    assert!(embedding_scale(&z, 0.0).is_err());
}

fn small_dp() -> DiffusionPriorConfig {
    DiffusionPriorConfig {
        width: 32,
        depth: 2,
        heads: 4,
        timesteps: 20,
        ..DiffusionPriorConfig::default()
    }
}

#[test]
fn diffusion_prior_reranks_independent_candidates() {
    let model = DiffusionPriorModel::new(small_dp(), 16, 4.0, 0).unwrap();
    let caps = captions(6);
    let zt = unit_rows(6, 16, 8);
    let opts = PriorSampleOptions { steps: 10, ..Default::default() };
    let s = model.sample(&caps, &zt, &opts, &mut rng::stream(0, "dp")).unwrap();
    assert_ne!(s.candidates[0], s.candidates[1]);
    for i in 0..6 {
        let chosen = s.chosen.index0(i);
        let best = if s.dots[i][1] > s.dots[i][0] { 1 } else { 0 };
        assert_eq!(chosen, s.candidates[best].index0(i));
        assert!(chosen.dot(&zt.index0(i)) as f64 >= s.dots[i][0].min(s.dots[i][1]));
        assert!(s.dots[i][best] >= s.dots[i][1 - best]);
        assert!((chosen.norm() - 1.0).abs() < 1e-5);
    }
    let again = model.sample(&caps, &zt, &opts, &mut rng::stream(0, "dp")).unwrap();
    assert_eq!(again.chosen, s.chosen);
}

#[test]
fn prior_training_reduces_loss_and_leaves_encoder_frozen() {
    let data = generate_dataset(96, 4);
    let clip = ClipModel::new(ClipConfig::default(), 0).unwrap();
    let before = clip.store.checksum();
    let optim = OptimConfig {
        steps: 40,
        batch_size: 16,
        lr: 1e-3,
        weight_decay: 0.0,
        beta2: 0.99,
        warmup: 5,
        grad_clip: 1.0,
        ema_decay: 0.9,
    };
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;

    let dp = train_diffusion_prior(small_dp(), &optim, &data, &clip, 0).unwrap();
    let l = &dp.losses;
    assert!(mean(&l[l.len() - 8..]) < mean(&l[..8]), "{l:?}");
    let pv = pixel_variance(&data);
    let z = PairedEmbeddings::compute(&clip, &data).unwrap().image;
    assert!((dp.model.scale as f64 - embedding_scale(&z, pv).unwrap()).abs() < 1e-3);

    let ar = train_ar_prior(small_ar(), &optim, &data, &clip, 0).unwrap();
    let l = &ar.losses;
    assert!((l[0] as f64 - 64f64.ln()).abs() < 1e-3);
    assert!(mean(&l[l.len() - 8..]) < mean(&l[..8]), "{l:?}");
    assert_eq!(clip.store.checksum(), before);
}
