use rand::Rng as _;

use super::PairedEmbeddings;
use crate::clip::ClipModel;
use crate::data::{CaptionTokens, DatasetRecord, Tokenizer, CONTEXT_LENGTH};
use crate::diffusion::{self, Guided, NoiseSchedule, Prediction, SampleOptions, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{timestep_embed_batch, Ctx, Linear, Transformer, TransformerConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};
use crate::train::{OptimConfig, Trainer};

/// Sequence: caption tokens, `z_t`, timestep, noised `z_i`, query.
const SEQ_LEN: usize = CONTEXT_LENGTH + 4;
const CANDIDATES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionPriorConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub text_drop: f64,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
}

impl Default for DiffusionPriorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 4,
            heads: 4,
            text_drop: 0.1,
            schedule: ScheduleKind::Cosine,
            timesteps: 100,
        }
    }
}

/// `sqrt(target_var / v)` where `v` is the mean per-coordinate variance of `z` [N, D].
pub fn embedding_scale(z: &Tensor<f32>, target_var: f64) -> Result<f64> {
    if z.rank() != 2 || z.shape()[0] < 2 || !(target_var > 0.0) {
        return Err(Error::invalid("embedding_scale", format!("shape {:?}, target {target_var}", z.shape())));
    }
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut mean = vec![0.0f64; d];
    for row in z.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64 / n as f64);
    }
    let mut var = 0.0;
    for row in z.data().chunks(d) {
        var += row.iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>();
    }
    let var = var / (n * d) as f64;
    if !(var > 0.0) {
        return Err(Error::invalid("embedding_scale", "embeddings have zero variance"));
    }
    Ok((target_var / var).sqrt())
}

#[derive(Clone, Debug)]
pub struct DiffusionPriorModel {
    pub config: DiffusionPriorConfig,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    /// Multiplier taking unit embeddings to the diffusion space.
    pub scale: f32,
    embed_dim: usize,
    text_tok: ParamId,
    pos: ParamId,
    zt_proj: Linear,
    time_proj: Linear,
    x_proj: Linear,
    query: ParamId,
    transformer: Transformer,
    head: Linear,
}

/// Reranked prior draws: `chosen` [B, D] plus both candidates and their dot products with `z_t`.
#[derive(Clone, Debug)]
pub struct PriorSample {
    pub chosen: Tensor<f32>,
    pub candidates: [Tensor<f32>; CANDIDATES],
    pub dots: Vec<[f64; CANDIDATES]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSampleOptions {
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
}

impl Default for PriorSampleOptions {
    fn default() -> Self {
        Self {
            steps: 64,
            guidance: 1.0,
            eta: 0.0,
        }
    }
}

impl DiffusionPriorModel {
    pub fn new(config: DiffusionPriorConfig, embed_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.text_drop) || !(scale > 0.0) {
            return Err(Error::invalid("diffusion_prior", "bad drop rate or scale"));
        }
        let mut rng = rng::stream(seed, "diffusion_prior.init");
        let mut store = ParamStore::new();
        let w = config.width;
        let tcfg = TransformerConfig {
            width: w,
            depth: config.depth,
            heads: config.heads,
            context_length: SEQ_LEN,
            causal: true,
        };
        Ok(Self {
            schedule: NoiseSchedule::new(config.schedule, config.timesteps)?,
            scale: scale as f32,
            embed_dim,
            text_tok: store.add_uniform("dp.text_tok", &[Tokenizer.vocab_size(), w], 0.1, &mut rng),
            pos: store.add_uniform("dp.pos", &[SEQ_LEN, w], 0.1, &mut rng),
            zt_proj: Linear::new(&mut store, "dp.zt_proj", embed_dim, w, &mut rng),
            time_proj: Linear::new(&mut store, "dp.time_proj", w, w, &mut rng),
            x_proj: Linear::new(&mut store, "dp.x_proj", embed_dim, w, &mut rng),
            query: store.add_uniform("dp.query", &[1, 1, w], 0.1, &mut rng),
            transformer: Transformer::new(&mut store, "dp.tf", tcfg, &mut rng)?,
            head: Linear::new(&mut store, "dp.head", w, embed_dim, &mut rng),
            config,
            store,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Predicted clean scaled embedding [B, D] from the final position.
    pub fn forward<'g>(
        &self,
        cx: Ctx<'g, f32>,
        x_t: Var<'g, f32>,
        t: &[usize],
        captions: &[CaptionTokens],
        zt: &Tensor<f32>,
    ) -> Result<Var<'g, f32>> {
        let b = captions.len();
        let (w, d) = (self.config.width, self.embed_dim);
        if x_t.shape() != [b, d] || zt.shape() != [b, d] || t.len() != b {
            return Err(Error::invalid("diffusion_prior", format!("inconsistent batch of {b}")));
        }
        let mut ids = Vec::with_capacity(b * CONTEXT_LENGTH);
        for c in captions {
            if c.ids.len() != CONTEXT_LENGTH {
                return Err(Error::invalid("diffusion_prior", format!("caption of {} tokens", c.ids.len())));
            }
            ids.extend_from_slice(&c.ids);
        }
        let one = |v: Var<'g, f32>| v.reshape(&[b, 1, w]);
        let time = cx.g.constant(timestep_embed_batch(t, w)?);
        let query = cx.g.constant(Tensor::zeros(&[b, 1, w])).add(cx.p(self.query))?;
        let parts = [
            cx.g.embedding(cx.p(self.text_tok), &ids)?.reshape(&[b, CONTEXT_LENGTH, w])?,
            one(self.zt_proj.forward(cx, cx.g.constant(zt.clone()))?)?,
            one(self.time_proj.forward(cx, time)?)?,
            one(self.x_proj.forward(cx, x_t)?)?,
            query,
        ];
        let x = cx.g.concat(&parts, 1)?.add(cx.p(self.pos))?;
        let h = self.transformer.forward(cx, x)?;
        let last = h.slice(1, SEQ_LEN - 1, 1)?.reshape(&[b, w])?;
        self.head.forward(cx, last)
    }

    fn predict(&self, x_t: &Tensor<f32>, t: usize, captions: &[CaptionTokens], zt: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let b = captions.len();
        let out = self.forward(Ctx::new(&g, &self.store), g.constant(x_t.clone()), &vec![t; b], captions, zt)?;
        Ok((*out.value()).clone())
    }

    /// One DDIM chain; returns unit embeddings [B, D].
    pub fn sample_once(&self, captions: &[CaptionTokens], zt: &Tensor<f32>, opts: &PriorSampleOptions, rng: &mut Rng) -> Result<Tensor<f32>> {
        let b = captions.len();
        let null_caps = vec![CaptionTokens::empty(); b];
        let null_zt = Tensor::zeros(zt.shape());
        let cond = |x: &Tensor<f32>, t: usize| Ok(Prediction::X0(self.predict(x, t, captions, zt)?));
        let uncond = |x: &Tensor<f32>, t: usize| Ok(Prediction::X0(self.predict(x, t, &null_caps, &null_zt)?));
        let guided = Guided {
            cond: &cond,
            uncond: &uncond,
            scale: opts.guidance,
        };
        let sopts = SampleOptions {
            steps: opts.steps,
            eta: opts.eta,
            clip: None,
        };
        let x = diffusion::sample(&self.schedule, &guided, &[b, self.embed_dim], &sopts, rng)?;
        Ok(x.scale(1.0 / self.scale).normalized_rows())
    }

    /// Two independent chains per caption, keeping the one with the larger `z . z_t`.
    pub fn sample(&self, captions: &[CaptionTokens], zt: &Tensor<f32>, opts: &PriorSampleOptions, rng: &mut Rng) -> Result<PriorSample> {
        if opts.guidance < 0.0 {
            return Err(Error::invalid("diffusion_prior", format!("guidance scale {} must be >= 0", opts.guidance)));
        }
        let base: u64 = rng.random();
        let candidates = [0, 1].map(|i| {
            let mut r = rng::indexed(base, "diffusion_prior.candidate", i);
            self.sample_once(captions, zt, opts, &mut r)
        });
        let [a, b] = candidates;
        let candidates = [a?, b?];
        let d = self.embed_dim;
        let mut chosen = candidates[0].clone();
        let mut dots = Vec::with_capacity(captions.len());
        for (i, t) in zt.data().chunks(d).enumerate() {
            let dot = |c: &Tensor<f32>| c.data()[i * d..(i + 1) * d].iter().zip(t).map(|(x, y)| (*x as f64) * (*y as f64)).sum::<f64>();
            let pair = [dot(&candidates[0]), dot(&candidates[1])];
            if pair[1] > pair[0] {
                chosen.data_mut()[i * d..(i + 1) * d].copy_from_slice(&candidates[1].data()[i * d..(i + 1) * d]);
            }
            dots.push(pair);
        }
        Ok(PriorSample { chosen, candidates, dots })
    }

    pub fn sample_captions(&self, clip: &ClipModel, captions: &[CaptionTokens], opts: &PriorSampleOptions, rng: &mut Rng) -> Result<PriorSample> {
        self.sample(captions, &clip.embed_texts(captions)?, opts, rng)
    }
}

pub struct DiffusionPriorTraining {
    pub model: DiffusionPriorModel,
    pub raw: Vec<Tensor<f32>>,
    pub losses: Vec<f32>,
}

/// Variance of all pixel values in `data`.
pub fn pixel_variance(data: &[DatasetRecord]) -> f64 {
    let n: usize = data.iter().map(|r| r.image.numel()).sum();
    let mean = data.iter().flat_map(|r| r.image.data()).map(|&v| v as f64).sum::<f64>() / n as f64;
    data.iter().flat_map(|r| r.image.data()).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64
}

/// Clean-embedding regression with 10%-style text dropout; the scale is set
/// so scaled embeddings match the pixel variance of `data`.
pub fn train_diffusion_prior(
    config: DiffusionPriorConfig,
    optim: &OptimConfig,
    data: &[DatasetRecord],
    clip: &ClipModel,
    seed: u64,
) -> Result<DiffusionPriorTraining> {
    if data.len() < 2 {
        return Err(Error::invalid("train_diffusion_prior", "need at least two records"));
    }
    let pairs = PairedEmbeddings::compute(clip, data)?;
    let scale = embedding_scale(&pairs.image, pixel_variance(data))?;
    let d = pairs.image.shape()[1];
    let mut model = DiffusionPriorModel::new(config, d, scale, seed)?;
    let mut trainer = Trainer::new(optim.clone(), &model.store)?;
    let mut rng = rng::stream(seed, "diffusion_prior.train");
    let bs = optim.batch_size;
    let s = model.scale;
    for _ in 0..optim.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..data.len())).collect();
        let t = model.schedule.sample_timesteps(bs, &mut rng);
        let mut x0 = Vec::with_capacity(bs * d);
        let mut zt = Vec::with_capacity(bs * d);
        let mut captions = Vec::with_capacity(bs);
        for &i in &idx {
            x0.extend(pairs.image.data()[i * d..(i + 1) * d].iter().map(|v| v * s));
            if rng.random_bool(model.config.text_drop) {
                captions.push(CaptionTokens::empty());
                zt.extend(std::iter::repeat_n(0.0, d));
            } else {
                captions.push(data[i].caption.clone());
                zt.extend_from_slice(&pairs.text.data()[i * d..(i + 1) * d]);
            }
        }
        let x0 = Tensor::new(&[bs, d], x0)?;
        let noise = rng::normal::<f32>(&[bs, d], &mut rng);
        let mut xt = Vec::with_capacity(bs);
        for k in 0..bs {
            xt.push(model.schedule.q_sample(&x0.index0(k), t[k], &noise.index0(k))?);
        }
        let g = Graph::new();
        let pred = model.forward(Ctx::new(&g, &model.store), g.constant(Tensor::stack(&xt)?), &t, &captions, &Tensor::new(&[bs, d], zt)?)?;
        // Squared error per embedding, in unscaled units.
        let loss = pred.sub(g.constant(x0))?.square()?.mean().scale(d as f32 / (s * s));
        let value = loss.value().item();
        let grads = g.backward(loss, &model.store)?;
        trainer.step(&mut model.store, grads, value)?;
    }
    let raw = model.store.snapshot();
    if optim.steps > 0 {
        model.store.load_from(trainer.ema())?;
    }
    Ok(DiffusionPriorTraining {
        model,
        raw,
        losses: trainer.losses,
    })
}
