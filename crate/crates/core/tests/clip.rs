use unclip::clip::*;
use unclip::data::{generate_dataset, render_lr, CaptionTokens, Color};
use unclip::numerics::{Graph, Tensor};
use unclip::nn::Ctx;
use unclip::rng;
use unclip::train::OptimConfig;

fn small() -> ClipConfig {
    ClipConfig {
        embed_dim: 16,
        image_channels: 8,
        text_width: 32,
        text_depth: 1,
        text_heads: 2,
    }
}

fn norms(z: &Tensor<f32>) -> Vec<f64> {
    let d = z.shape()[1];
    z.data().chunks(d).map(|r| r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()).collect()
}

#[test]
fn embeddings_are_unit_norm_and_deterministic() {
    let data = generate_dataset(12, 5);
    let m = ClipModel::new(small(), 3).unwrap();
    let imgs: Vec<_> = data.iter().map(|r| r.image.clone()).collect();
    let caps: Vec<_> = data.iter().map(|r| r.caption.clone()).collect();
    let zi = m.embed_images(&imgs).unwrap();
    let zt = m.embed_texts(&caps).unwrap();
    for n in norms(&zi).into_iter().chain(norms(&zt)) {
        assert!((n - 1.0).abs() < 1e-5, "{n}");
    }
    assert_eq!(m.embed_image(&imgs[0]).unwrap(), m.embed_image(&imgs[0]).unwrap());
    assert_eq!(m.embed_text(&caps[0]).unwrap(), m.embed_text(&caps[0]).unwrap());
    let again = ClipModel::new(small(), 3).unwrap();
    assert_eq!(again.embed_images(&imgs).unwrap(), zi);
    // Batched and single embeddings agree.
    let single = m.embed_image(&imgs[4]).unwrap();
    for (a, b) in single.data().iter().zip(&zi.data()[4 * 16..5 * 16]) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn wrong_image_shape_rejected() {
    let m = ClipModel::new(small(), 0).unwrap();
    assert!(m.embed_image(&Tensor::zeros(&[3, 8, 8])).is_err());
    assert!(m.embed_image(&Tensor::zeros(&[16, 16])).is_err());
}

/// Direct f64 evaluation of the symmetric cross-entropy.
fn naive_loss(zi: &[Vec<f64>], zt: &[Vec<f64>], scale: f64) -> f64 {
    let n = zi.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| scale * dot(&zi[i], &zt[j])).collect();
        let col: Vec<f64> = (0..n).map(|j| scale * dot(&zi[j], &zt[i])).collect();
        let lse = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
        total += 0.5 * (lse(&row) - row[i]) + 0.5 * (lse(&col) - col[i]);
    }
    total / n as f64
}

fn random_unit(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let z = rng::normal::<f64>(&[n, d], &mut rng::stream(seed, "unit"));
    z.data()
        .chunks(d)
        .map(|r| {
            let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn loss_of(zi: &[Vec<f64>], zt: &[Vec<f64>], scale: f32) -> f32 {
    let (n, d) = (zi.len(), zi[0].len());
    let flat = |v: &[Vec<f64>]| Tensor::new(&[n, d], v.iter().flatten().map(|x| *x as f32).collect()).unwrap();
    let g = Graph::inference();
    let l = contrastive_from_features(g.constant(flat(zi)), g.constant(flat(zt)), g.constant(Tensor::from_vec(vec![scale])))
        .unwrap();
    l.value().item()
}

#[test]
fn contrastive_loss_matches_direct_evaluation() {
    for (seed, scale) in [(1, 1.0), (2, 5.0), (3, 14.3)] {
        let zi = random_unit(10, 16, seed);
        let zt = random_unit(10, 16, seed + 100);
        let got = loss_of(&zi, &zt, scale) as f64;
        let want = naive_loss(&zi, &zt, scale as f64);
        assert!((got - want).abs() < 1e-4 * want.max(1.0), "{got} vs {want}");
        assert!(got >= 0.0);
    }
}

#[test]
fn random_embeddings_give_log_n() {
    // Averaged over independent draws, the loss of unrelated unit vectors at
    // unit scale sits at ln n plus a small variance term.
    let n = 16;
    let mean: f64 = (0..50).map(|s| loss_of(&random_unit(n, 64, s), &random_unit(n, 64, s + 1000), 1.0) as f64).sum::<f64>() / 50.0;
    assert!((mean - (n as f64).ln()).abs() < 0.05, "{mean}");
}

#[test]
fn aligned_orthogonal_embeddings_at_high_scale_give_zero_loss() {
    let eye: Vec<Vec<f64>> = (0..8).map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    assert!(loss_of(&eye, &eye, 100.0) < 1e-6);
}

#[test]
fn loss_is_permutation_invariant_and_needs_two_pairs() {
    let data = generate_dataset(64, 9);
    let mut seen = std::collections::HashSet::new();
    let batch: Vec<_> = data.iter().filter(|r| seen.insert(r.caption.clone())).take(6).collect();
    let m = ClipModel::new(small(), 1).unwrap();
    let eval = |order: &[usize]| {
        let g = Graph::inference();
        let imgs = Tensor::stack(&order.iter().map(|&i| batch[i].image.clone()).collect::<Vec<_>>()).unwrap();
        let caps: Vec<CaptionTokens> = order.iter().map(|&i| batch[i].caption.clone()).collect();
        m.contrastive_loss(Ctx::new(&g, &m.store), g.constant(imgs), &caps).unwrap().value().item()
    };
    let a = eval(&[0, 1, 2, 3, 4, 5]);
    let b = eval(&[3, 5, 0, 2, 1, 4]);
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");

    let g = Graph::inference();
    let one = g.constant(Tensor::stack(&[batch[0].image.clone()]).unwrap());
    assert!(m.contrastive_loss(Ctx::new(&g, &m.store), one, &[batch[0].caption.clone()]).is_err());
}

fn optim(steps: usize) -> OptimConfig {
    OptimConfig {
        steps,
        batch_size: 16,
        lr: 2e-3,
        weight_decay: 0.01,
        beta2: 0.99,
        warmup: 5,
        grad_clip: 1.0,
        ema_decay: 0.9,
    }
}

#[test]
fn zero_steps_returns_initialized_model() {
    let data = generate_dataset(32, 0);
    let t = train_clip(small(), &optim(0), &data, 7).unwrap();
    let fresh = ClipModel::new(small(), 7).unwrap();
    assert_eq!(t.model.store.snapshot(), fresh.store.snapshot());
    assert!(t.losses.is_empty());
    assert!(train_clip(small(), &optim(1), &[], 7).is_err());
}

#[test]
fn short_training_is_deterministic_and_learns() {
    let data = generate_dataset(512, 1);
    let a = train_clip(small(), &optim(60), &data, 2).unwrap();
    let b = train_clip(small(), &optim(60), &data, 2).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model.store.snapshot(), b.model.store.snapshot());
    let head: f32 = a.losses[..10].iter().sum::<f32>() / 10.0;
    let tail: f32 = a.losses[50..].iter().sum::<f32>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    let log_temp = a.model.temperature_scale().ln();
    assert!((-4.6052..=4.6052).contains(&log_temp));
}

#[test]
fn color_only_difference_changes_embedding() {
    let data = generate_dataset(256, 4);
    let t = train_clip(small(), &optim(40), &data, 0).unwrap();
    let scene = data[0].scene.clone();
    let mut other = scene.clone();
    other.objects[0].color = *Color::ALL.iter().find(|c| **c != scene.objects[0].color).unwrap();
    let za = t.model.embed_image(&render_lr(&scene)).unwrap();
    let zb = t.model.embed_image(&render_lr(&other)).unwrap();
    let cos: f32 = za.data().iter().zip(zb.data()).map(|(a, b)| a * b).sum();
    assert!(cos < 1.0 - 1e-6, "{cos}");
}
