use unclip::clip::{ClipConfig, ClipModel};
use unclip::data::{generate_dataset, CaptionTokens, HR_SIZE};
use unclip::decoder::*;
use unclip::diffusion::ScheduleKind;
use unclip::numerics::Tensor;
use unclip::rng;
use unclip::train::OptimConfig;

fn tiny() -> DecoderConfig {
    DecoderConfig {
        embed_dim: 8,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        resblocks_per_stage: 1,
        attention_resolutions: vec![8],
        heads: 2,
        dropout: 0.0,
        text_width: 16,
        text_depth: 1,
        text_heads: 2,
        use_embedding: true,
        use_text: true,
        embed_drop: 0.1,
        caption_drop: 0.5,
        schedule: ScheduleKind::Cosine,
        timesteps: 20,
    }
}

fn tiny_clip() -> ClipModel {
    ClipModel::new(
        ClipConfig {
            embed_dim: 8,
            image_channels: 8,
            text_width: 16,
            text_depth: 1,
            text_heads: 2,
        },
        0,
    )
    .unwrap()
}

fn optim(steps: usize) -> OptimConfig {
    OptimConfig {
        steps,
        batch_size: 8,
        lr: 2e-3,
        weight_decay: 0.0,
        beta2: 0.99,
        warmup: 2,
        grad_clip: 1.0,
        ema_decay: 0.9,
    }
}

/// Output layers start at zero; jitter every weight so conditioning paths are live.
fn randomized(seed: u64) -> DecoderModel {
    let mut m = DecoderModel::new(tiny(), seed).unwrap();
    let mut r = rng::stream(seed, "jitter");
    for v in m.store.values_mut() {
        let n = rng::normal::<f32>(v.shape(), &mut r);
        v.axpy(0.2, &n).unwrap();
    }
    m
}

fn unit_rows(b: usize, d: usize, seed: u64) -> Tensor<f32> {
    rng::normal::<f32>(&[b, d], &mut rng::stream(seed, "z")).normalized_rows()
}

#[test]
fn prediction_has_input_shape_and_depends_on_embedding() {
    let m = randomized(1);
    let data = generate_dataset(2, 0);
    let caps: Vec<_> = data.iter().map(|r| r.caption.clone()).collect();
    let x = rng::normal::<f32>(&[2, 3, 16, 16], &mut rng::stream(0, "x"));
    let a = m.eps_cached(&x, 10, &m.prepare(Some(&unit_rows(2, 8, 1)), &caps).unwrap()).unwrap();
    let b = m.eps_cached(&x, 10, &m.prepare(Some(&unit_rows(2, 8, 2)), &caps).unwrap()).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert_ne!(a, b);
    assert!(a.data().iter().all(|v| v.is_finite()));
}

#[test]
fn null_embedding_with_empty_caption_is_the_unconditional_branch() {
    let m = randomized(2);
    let x = rng::normal::<f32>(&[3, 3, 16, 16], &mut rng::stream(0, "x"));
    let empty = vec![CaptionTokens::empty(); 3];
    let a = m.eps_cached(&x, 7, &m.prepare(None, &empty).unwrap()).unwrap();
    let b = m.eps_cached(&x, 7, &m.prepare_uncond(3).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = m.eps_cached(&x, 7, &m.prepare(Some(&unit_rows(3, 8, 0)), &empty).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn drop_frequencies_match_configured_rates() {
    let n = 10_000;
    let drops = sample_drops(n, 0.10, 0.50, &mut rng::stream(3, "drops"));
    for (p, count) in [
        (0.10, drops.iter().filter(|d| d.0).count()),
        (0.50, drops.iter().filter(|d| d.1).count()),
    ] {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count as f64 - n as f64 * p).abs() < 3.0 * sd, "{count} for p={p}");
    }
    let both = drops.iter().filter(|d| d.0 && d.1).count() as f64;
    let sd = (n as f64 * 0.05 * 0.95).sqrt();
    assert!((both - 0.05 * n as f64).abs() < 3.0 * sd, "drops are not independent: {both}");
    assert!(sample_drops(1000, 0.0, 0.0, &mut rng::stream(0, "d")).iter().all(|d| !d.0 && !d.1));
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny();
    c.embed_drop = 1.5;
    assert!(DecoderModel::new(c, 0).is_err());
    let mut c = tiny();
    c.use_embedding = false;
    c.use_text = false;
    assert!(DecoderModel::new(c, 0).is_err());
}

#[test]
fn decode_is_deterministic_and_checks_guidance() {
    let m = DecoderModel::new(tiny(), 4).unwrap();
    let z = unit_rows(2, 8, 5);
    let caps = vec![CaptionTokens::empty(); 2];
    let opts = DecodeOptions { guidance: 3.0, eta: 0.5, steps: 5 };
    let a = m.decode(Some(&z), &caps, &opts, &mut rng::stream(9, "s"), None).unwrap();
    let b = m.decode(Some(&z), &caps, &opts, &mut rng::stream(9, "s"), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[2, 3, 16, 16]);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let bad = DecodeOptions { guidance: -0.5, ..opts.clone() };
    assert!(m.decode(Some(&z), &caps, &bad, &mut rng::stream(9, "s"), None).is_err());

    // With a given latent and eta = 0 the rng is never consulted.
    let x_t = rng::normal::<f32>(&[2, 3, 16, 16], &mut rng::stream(1, "xt"));
    let det = DecodeOptions { eta: 0.0, ..opts };
    let c = m.decode(Some(&z), &caps, &det, &mut rng::stream(1, "a"), Some(x_t.clone())).unwrap();
    let d = m.decode(Some(&z), &caps, &det, &mut rng::stream(2, "b"), Some(x_t)).unwrap();
    assert_eq!(c, d);
    let wrong = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(m.decode(Some(&z), &caps, &det, &mut rng::stream(1, "a"), Some(wrong)).is_err());
}

#[test]
fn noise_estimate_tracks_the_input_at_the_last_timestep() {
    let m = DecoderModel::new(tiny(), 6).unwrap();
    let x = rng::normal::<f32>(&[1, 3, 16, 16], &mut rng::stream(0, "x"));
    let eps = m.eps_cached(&x, 20, &m.prepare_uncond(1).unwrap()).unwrap();
    let ab = m.schedule.alpha_bar(20).unwrap();
    let max_dev = eps.data().iter().zip(x.data()).map(|(e, v)| (e - v).abs()).fold(0.0f32, f32::max);
    // Deviation is bounded by the skip weights, independent of training.
    assert!((max_dev as f64) < 1e-3 + 50.0 * ab.sqrt(), "{max_dev}");
}

/// Fixed-noise evaluation of the training objective.
fn eval_loss(m: &DecoderModel, clip: &ClipModel, data: &[unclip::data::DatasetRecord]) -> f64 {
    let imgs: Vec<_> = data.iter().map(|r| r.image.clone()).collect();
    let caps: Vec<_> = data.iter().map(|r| r.caption.clone()).collect();
    let x0 = Tensor::stack(&imgs).unwrap();
    let cache = m.prepare(Some(&clip.embed_images(&imgs).unwrap()), &caps).unwrap();
    let mut total = 0.0;
    for t in [2, 6, 10, 14, 18] {
        let noise = rng::normal::<f32>(x0.shape(), &mut rng::stream(t as u64, "eval"));
        let xt = m.schedule.q_sample(&x0, t, &noise).unwrap();
        let eps = m.eps_cached(&xt, t, &cache).unwrap();
        total += eps.data().iter().zip(noise.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / noise.numel() as f64;
    }
    total / 5.0
}

#[test]
fn training_is_deterministic_learns_and_leaves_clip_untouched() {
    let data = generate_dataset(64, 1);
    let clip = tiny_clip();
    let before = clip.store.checksum();
    let a = train_decoder(tiny(), &optim(60), &data, &clip, 3).unwrap();
    let b = train_decoder(tiny(), &optim(60), &data, &clip, 3).unwrap();
    assert_eq!(clip.store.checksum(), before);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model.store.snapshot(), b.model.store.snapshot());
    assert_ne!(a.raw, a.model.store.snapshot(), "EMA weights differ from raw weights");
    let fresh = DecoderModel::new(tiny(), 3).unwrap();
    let (l0, l1) = (eval_loss(&fresh, &clip, &data[..16]), eval_loss(&a.model, &clip, &data[..16]));
    assert!(l1 < l0, "{l0} -> {l1}");
    assert!(train_decoder(tiny(), &optim(1), &[], &clip, 0).is_err());
}

#[test]
fn caption_only_decoder_ignores_embeddings() {
    let mut c = tiny();
    c.use_embedding = false;
    let mut m = DecoderModel::new(c, 0).unwrap();
    let mut r = rng::stream(0, "jitter");
    for v in m.store.values_mut() {
        let n = rng::normal::<f32>(v.shape(), &mut r);
        v.axpy(0.2, &n).unwrap();
    }
    assert!(m.store.iter().all(|(n, _)| !n.contains("embed_to") && !n.contains("null_embedding")));
    let caps: Vec<_> = generate_dataset(2, 3).iter().map(|r| r.caption.clone()).collect();
    let x = rng::normal::<f32>(&[2, 3, 16, 16], &mut rng::stream(0, "x"));
    let a = m.eps_cached(&x, 3, &m.prepare(Some(&unit_rows(2, 8, 1)), &caps).unwrap()).unwrap();
    let b = m.eps_cached(&x, 3, &m.prepare(Some(&unit_rows(2, 8, 2)), &caps).unwrap()).unwrap();
    assert_eq!(a, b);
}

fn tiny_upsampler() -> UpsamplerConfig {
    UpsamplerConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        resblocks_per_stage: 1,
        timesteps: 20,
        ..UpsamplerConfig::default()
    }
}

#[test]
fn upsampler_is_convolution_only() {
    let m = UpsamplerModel::new(UpsamplerConfig::default(), 0).unwrap();
    assert!(!m.has_attention());
    assert_eq!(m.config.crop * 2, HR_SIZE);
    assert_eq!((m.config.blur_kernel, m.config.blur_sigma), (3, 0.6));
}

#[test]
fn blur_keeps_constants_and_averages_neighbours() {
    let c = Tensor::<f32>::full(&[3, 16, 16], 0.37);
    let b = gaussian_blur(&c, 0.6, 3).unwrap();
    assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
    // Single impulse: separable kernel w = [e, 1, e] / (1 + 2e), e = exp(-1 / (2 sigma^2)).
    let mut imp = Tensor::<f32>::zeros(&[1, 5, 5]);
    imp.data_mut()[12] = 1.0;
    let out = gaussian_blur(&imp, 0.6, 3).unwrap();
    let e = (-1.0f64 / 0.72).exp();
    let (wc, ws) = (1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e));
    for (idx, want) in [(12, wc * wc), (7, ws * wc), (6, ws * ws), (0, 0.0)] {
        assert!((out.data()[idx] as f64 - want).abs() < 1e-6, "{idx}");
    }
    assert!(gaussian_blur(&c, 0.6, 2).is_err());
}

#[test]
fn crops_stay_inside() {
    let mut r = rng::stream(0, "crop");
    let mut corners = std::collections::HashSet::new();
    for _ in 0..2000 {
        let (y, x) = random_crop(32, 16, &mut r);
        assert!(y + 16 <= 32 && x + 16 <= 32);
        corners.insert((y, x));
    }
    assert!(corners.contains(&(0, 0)) && corners.contains(&(16, 16)));
}

#[test]
fn upsample_shape_and_determinism() {
    let data = generate_dataset(16, 2);
    let t = unclip::decoder::train_upsampler(tiny_upsampler(), &optim(3), &data, 0).unwrap();
    let low = Tensor::stack(&[data[0].image.clone(), data[1].image.clone()]).unwrap();
    let a = t.model.upsample(&low, 4, 1.0, &mut rng::stream(5, "u")).unwrap();
    let b = t.model.upsample(&low, 4, 1.0, &mut rng::stream(5, "u")).unwrap();
    assert_eq!(a.shape(), &[2, 3, 32, 32]);
    assert_eq!(a, b);
    assert!(t.model.upsample(&Tensor::zeros(&[1, 3, 32, 32]), 4, 1.0, &mut rng::stream(5, "u")).is_err());
}
