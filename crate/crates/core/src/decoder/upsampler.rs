use rand::Rng as _;

use crate::data::{DatasetRecord, HR_SIZE, IMAGE_SIZE};
use crate::diffusion::{self, NoiseSchedule, Prediction, SampleOptions, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Denoiser, DenoiserConfig};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::rng::{self, Rng};
use crate::train::{OptimConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_stage: usize,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    /// Training crop side; inference runs at the full target size.
    pub crop: usize,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            resblocks_per_stage: 1,
            schedule: ScheduleKind::Cosine,
            timesteps: 100,
            crop: HR_SIZE / 2,
            blur_sigma: 0.6,
            blur_kernel: 3,
        }
    }
}

/// Gaussian blur of [C, H, W] with clamped edges and a normalized kernel.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64, kernel: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || kernel % 2 == 0 || sigma <= 0.0 {
        return Err(Error::invalid("gaussian_blur", format!("shape {s:?}, kernel {kernel}, sigma {sigma}")));
    }
    let r = (kernel / 2) as isize;
    let weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let w: Vec<f32> = weights.iter().map(|v| (v / total) as f32).collect();
    let (c, h, wd) = (s[0], s[1] as isize, s[2] as isize);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            let plane = &src[ch * (h * wd) as usize..(ch + 1) * (h * wd) as usize];
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = 0.0;
                    for (k, &wk) in w.iter().enumerate() {
                        let d = k as isize - r;
                        let (yy, xx) = if horizontal {
                            (y, (x + d).clamp(0, wd - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        acc += wk * plane[(yy * wd + xx) as usize];
                    }
                    out[ch * (h * wd) as usize + (y * wd + x) as usize] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    Tensor::new(s, pass(&tmp, false))
}

/// Square crop of side `size` at `(y, x)` from [C, H, W].
fn crop_at(img: &Tensor<f32>, y: usize, x: usize, size: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, w) = (s[0], s[2]);
    let plane = s[1] * w;
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for yy in y..y + size {
            let start = ch * plane + yy * w + x;
            out.extend_from_slice(&img.data()[start..start + size]);
        }
    }
    Tensor::new(&[c, size, size], out).expect("crop shape")
}

/// Top-left corner of a uniformly random crop fully inside `side`.
pub fn random_crop(side: usize, size: usize, rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(0..=side - size), rng.random_range(0..=side - size))
}

fn nearest_up(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let g = Graph::inference();
    let s = img.shape().to_vec();
    let v = g.constant(img.clone().reshape(&[1, s[0], s[1], s[2]])?).upsample2x()?;
    (*v.value()).clone().reshape(&[s[0], 2 * s[1], 2 * s[2]])
}

/// Conv-only denoiser over `[x_t | upsampled low-res]` channels.
#[derive(Clone, Debug)]
pub struct UpsamplerModel {
    pub config: UpsamplerConfig,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    denoiser: Denoiser,
}

impl UpsamplerModel {
    pub fn new(config: UpsamplerConfig, seed: u64) -> Result<Self> {
        if config.crop == 0 || config.crop > HR_SIZE {
            return Err(Error::invalid("upsampler", format!("crop {} for target {HR_SIZE}", config.crop)));
        }
        let mut store = ParamStore::new();
        let dcfg = DenoiserConfig {
            in_channels: 6,
            out_channels: 3,
            base_channels: config.base_channels,
            channel_multipliers: config.channel_multipliers.clone(),
            resblocks_per_stage: config.resblocks_per_stage,
            attention_resolutions: vec![],
            image_size: config.crop,
            cond_width: 0,
            heads: 1,
            dropout: 0.0,
        };
        let denoiser = Denoiser::new(&mut store, "up.unet", dcfg, &mut rng::stream(seed, "upsampler.init"))?;
        let schedule = NoiseSchedule::new(config.schedule, config.timesteps)?;
        Ok(Self {
            config,
            store,
            schedule,
            denoiser,
        })
    }

    pub fn has_attention(&self) -> bool {
        self.denoiser.has_attention() || self.store.iter().any(|(n, _)| n.contains("attn"))
    }

    fn eps(&self, x_t: &Tensor<f32>, cond: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let x = g.concat(&[g.constant(x_t.clone()), g.constant(cond.clone())], 1)?;
        Ok((*self.denoiser.forward(Ctx::new(&g, &self.store), x, t, None, None)?.value()).clone())
    }

    /// Upsamples [B, 3, 16, 16] to [B, 3, 32, 32].
    pub fn upsample(&self, low_res: &Tensor<f32>, steps: usize, eta: f64, rng: &mut Rng) -> Result<Tensor<f32>> {
        let s = low_res.shape();
        if s.len() != 4 || s[1..] != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::invalid("upsample", format!("expected [B, 3, 16, 16], got {s:?}")));
        }
        let cond = Tensor::stack(&low_res.unstack().iter().map(nearest_up).collect::<Result<Vec<_>>>()?)?;
        let model = |x: &Tensor<f32>, t: usize| Ok(Prediction::Eps(self.eps(x, &cond, &vec![t; s[0]])?));
        let opts = SampleOptions {
            steps,
            eta,
            clip: Some(1.0),
        };
        diffusion::sample(&self.schedule, &model, &[s[0], 3, HR_SIZE, HR_SIZE], &opts, rng)
    }
}

pub struct UpsamplerTraining {
    pub model: UpsamplerModel,
    pub raw: Vec<Tensor<f32>>,
    pub losses: Vec<f32>,
}

/// Trains on random crops of the high-res target; the conditioning image is
/// the blurred low-res image, nearest-upsampled and cropped identically.
pub fn train_upsampler(config: UpsamplerConfig, optim: &OptimConfig, data: &[DatasetRecord], seed: u64) -> Result<UpsamplerTraining> {
    if data.is_empty() {
        return Err(Error::invalid("train_upsampler", "empty dataset"));
    }
    let mut model = UpsamplerModel::new(config, seed)?;
    let mut trainer = Trainer::new(optim.clone(), &model.store)?;
    let mut rng = rng::stream(seed, "upsampler.train");
    let crop = model.config.crop;
    for _ in 0..optim.steps {
        let bs = optim.batch_size;
        let t = model.schedule.sample_timesteps(bs, &mut rng);
        let noise = rng::normal::<f32>(&[bs, 3, crop, crop], &mut rng);
        let mut xs = Vec::with_capacity(bs);
        let mut targets = Vec::with_capacity(bs);
        for k in 0..bs {
            let rec = &data[rng.random_range(0..data.len())];
            let blurred = gaussian_blur(&rec.image, model.config.blur_sigma, model.config.blur_kernel)?;
            let cond_full = nearest_up(&blurred)?;
            let (y, x) = random_crop(HR_SIZE, crop, &mut rng);
            let target = crop_at(&rec.image_hr, y, x, crop);
            let cond = crop_at(&cond_full, y, x, crop);
            let xt = model.schedule.q_sample(&target, t[k], &noise.index0(k))?;
            xs.push(Tensor::cat0(&[xt, cond])?);
            targets.push(target);
        }
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store);
        let pred = model.denoiser.forward(cx, g.constant(Tensor::stack(&xs)?), &t, None, None)?;
        let loss = pred.sub(g.constant(noise))?.square()?.mean();
        let value = loss.value().item();
        let grads = g.backward(loss, &model.store)?;
        trainer.step(&mut model.store, grads, value)?;
    }
    let raw = model.store.snapshot();
    if optim.steps > 0 {
        model.store.load_from(trainer.ema())?;
    }
    Ok(UpsamplerTraining {
        model,
        raw,
        losses: trainer.losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant_images() {
        let img = Tensor::full(&[3, 5, 7], 0.3f32);
        let b = gaussian_blur(&img, 0.6, 3).unwrap();
        assert!(b.sub(&img).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn crops_stay_inside() {
        let mut r = rng::stream(0, "crop");
        for _ in 0..1000 {
            let (y, x) = random_crop(32, 16, &mut r);
            assert!(y + 16 <= 32 && x + 16 <= 32);
        }
        let img = Tensor::new(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(crop_at(&img, 1, 2, 2).data(), &[6.0, 7.0, 10.0, 11.0]);
    }
}
