//! Diffusion decoder `P(x | z_i, y)` with classifier-free guidance, and the
//! convolution-only upsampler.

mod upsampler;

use rand::Rng as _;

pub use upsampler::{gaussian_blur, random_crop, train_upsampler, UpsamplerConfig, UpsamplerModel, UpsamplerTraining};

use crate::clip::{ClipModel, TextEncoder};
use crate::data::{CaptionTokens, DatasetRecord, CONTEXT_LENGTH, IMAGE_SIZE};
use crate::diffusion::{self, Denoise, Guided, NoiseSchedule, Prediction, SampleOptions, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Denoiser, DenoiserConfig, Linear, TransformerConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};
use crate::train::{OptimConfig, Trainer};

/// Number of context tokens projected from the image embedding.
pub const EMBED_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_stage: usize,
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub dropout: f64,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    /// Condition on the image embedding; off gives a caption-only decoder.
    pub use_embedding: bool,
    pub use_text: bool,
    pub embed_drop: f64,
    pub caption_drop: f64,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            resblocks_per_stage: 1,
            attention_resolutions: vec![8, 4],
            heads: 4,
            dropout: 0.0,
            text_width: 64,
            text_depth: 1,
            text_heads: 4,
            use_embedding: true,
            use_text: true,
            embed_drop: 0.1,
            caption_drop: 0.5,
            schedule: ScheduleKind::Cosine,
            timesteps: 100,
        }
    }
}

impl DecoderConfig {
    fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !p(self.embed_drop) || !p(self.caption_drop) {
            return Err(Error::invalid("decoder", "drop rates must lie in [0, 1]"));
        }
        if !self.use_embedding && !self.use_text {
            return Err(Error::invalid("decoder", "needs at least one conditioning pathway"));
        }
        Ok(())
    }
}

/// Per-example conditioning drops: `(drop embedding, drop caption)`.
pub fn sample_drops(n: usize, embed_drop: f64, caption_drop: f64, rng: &mut Rng) -> Vec<(bool, bool)> {
    (0..n)
        .map(|_| (rng.random_bool(embed_drop), rng.random_bool(caption_drop)))
        .collect()
}

/// Precomputed conditioning values for repeated denoiser calls.
#[derive(Clone, Debug)]
pub struct CondCache {
    extra: Option<Tensor<f32>>,
    tokens: Option<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    denoiser: Denoiser,
    text: Option<(TextEncoder, Linear)>,
    embed_to_time: Option<Linear>,
    embed_to_tokens: Option<Linear>,
    null_embedding: Option<ParamId>,
}

impl DecoderModel {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "decoder.init");
        let mut store = ParamStore::new();
        let dcfg = DenoiserConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels: config.base_channels,
            channel_multipliers: config.channel_multipliers.clone(),
            resblocks_per_stage: config.resblocks_per_stage,
            attention_resolutions: config.attention_resolutions.clone(),
            image_size: IMAGE_SIZE,
            cond_width: config.text_width,
            heads: config.heads,
            dropout: config.dropout,
        };
        let td = dcfg.time_dim();
        let denoiser = Denoiser::new(&mut store, "dec.unet", dcfg, &mut rng)?;
        let text = if config.use_text {
            let tcfg = TransformerConfig {
                width: config.text_width,
                depth: config.text_depth,
                heads: config.text_heads,
                context_length: CONTEXT_LENGTH,
                causal: true,
            };
            let enc = TextEncoder::new(&mut store, "dec.text", tcfg, &mut rng)?;
            let to_time = Linear::new(&mut store, "dec.text_to_time", config.text_width, td, &mut rng);
            Some((enc, to_time))
        } else {
            None
        };
        let (embed_to_time, embed_to_tokens, null_embedding) = if config.use_embedding {
            let d = config.embed_dim;
            (
                Some(Linear::new(&mut store, "dec.embed_to_time", d, td, &mut rng)),
                Some(Linear::new(&mut store, "dec.embed_to_tokens", d, EMBED_TOKENS * config.text_width, &mut rng)),
                Some(store.add_uniform("dec.null_embedding", &[1, d], 1.0 / (d as f64).sqrt(), &mut rng)),
            )
        } else {
            (None, None, None)
        };
        let schedule = NoiseSchedule::new(config.schedule, config.timesteps)?;
        Ok(Self {
            config,
            store,
            schedule,
            denoiser,
            text,
            embed_to_time,
            embed_to_tokens,
            null_embedding,
        })
    }

    /// Conditioning on the tape: extra time embedding [B, td] and context
    /// tokens [B, M, W] laid out as `[caption tokens | embedding tokens]`.
    /// Rows of `z` flagged in `null_rows` are replaced by the learned null embedding.
    fn condition<'g>(
        &self,
        cx: Ctx<'g, f32>,
        z: &Tensor<f32>,
        null_rows: &[bool],
        captions: &[CaptionTokens],
    ) -> Result<(Option<Var<'g, f32>>, Option<Var<'g, f32>>)> {
        let b = captions.len();
        let mut extra: Option<Var<'g, f32>> = None;
        let mut tokens: Vec<Var<'g, f32>> = Vec::new();
        let add = |acc: Option<Var<'g, f32>>, v: Var<'g, f32>| -> Result<Option<Var<'g, f32>>> {
            Ok(Some(match acc {
                Some(a) => a.add(v)?,
                None => v,
            }))
        };
        if let Some((enc, to_time)) = &self.text {
            let (seq, pooled) = enc.forward(cx, captions)?;
            extra = add(extra, to_time.forward(cx, pooled)?)?;
            tokens.push(seq);
        }
        if let (Some(to_time), Some(to_tokens), Some(null)) = (&self.embed_to_time, &self.embed_to_tokens, self.null_embedding)
        {
            let d = self.config.embed_dim;
            if z.shape() != [b, d] || null_rows.len() != b {
                return Err(Error::invalid("decoder", format!("embeddings {:?} for batch {b}", z.shape())));
            }
            let mut kept = z.clone();
            let mut mask = Vec::with_capacity(b);
            for (i, &null) in null_rows.iter().enumerate() {
                if null {
                    kept.data_mut()[i * d..(i + 1) * d].fill(0.0);
                }
                mask.push(if null { 1.0 } else { 0.0 });
            }
            let mask = cx.g.constant(Tensor::new(&[b, 1], mask)?);
            let zv = cx.g.constant(kept).add(mask.matmul(cx.p(null))?)?;
            extra = add(extra, to_time.forward(cx, zv)?)?;
            let w = self.config.text_width;
            tokens.push(to_tokens.forward(cx, zv)?.reshape(&[b, EMBED_TOKENS, w])?);
        }
        let tokens = match tokens.len() {
            0 => None,
            1 => Some(tokens[0]),
            _ => Some(cx.g.concat(&tokens, 1)?),
        };
        Ok((extra, tokens))
    }

    /// Predicted noise on the tape.
    pub fn forward<'g>(
        &self,
        cx: Ctx<'g, f32>,
        x_t: Var<'g, f32>,
        t: &[usize],
        z: &Tensor<f32>,
        null_rows: &[bool],
        captions: &[CaptionTokens],
    ) -> Result<Var<'g, f32>> {
        let (extra, tokens) = self.condition(cx, z, null_rows, captions)?;
        let f = self.denoiser.forward(cx, x_t, t, extra, tokens)?;
        self.skip(cx, x_t, t, f)
    }

    /// `eps = sqrt(1 - ab_t) x_t + sqrt(ab_t) f`, so the noise estimate near `t = T`
    /// stays close to `x_t` and the implied `x0` is well conditioned.
    fn skip<'g>(&self, cx: Ctx<'g, f32>, x_t: Var<'g, f32>, t: &[usize], f: Var<'g, f32>) -> Result<Var<'g, f32>> {
        let shape = x_t.value().shape().to_vec();
        let per = shape[1..].iter().product::<usize>();
        let (mut keep, mut scale) = (Vec::with_capacity(t.len() * per), Vec::with_capacity(t.len() * per));
        for &ti in t {
            let ab = self.schedule.alpha_bar(ti)?;
            keep.extend(std::iter::repeat_n((1.0 - ab).sqrt() as f32, per));
            scale.extend(std::iter::repeat_n(ab.sqrt() as f32, per));
        }
        let keep = cx.g.constant(Tensor::new(&shape, keep)?);
        let scale = cx.g.constant(Tensor::new(&shape, scale)?);
        keep.mul(x_t)?.add(scale.mul(f)?)
    }

    /// Conditioning for a batch; `z = None` (or a caption-only model) selects the null embedding.
    pub fn prepare(&self, z: Option<&Tensor<f32>>, captions: &[CaptionTokens]) -> Result<CondCache> {
        let b = captions.len();
        let zeros = Tensor::zeros(&[b, self.config.embed_dim]);
        let (z, nulls) = match z {
            Some(z) => (z, vec![false; b]),
            None => (&zeros, vec![true; b]),
        };
        let g = Graph::inference();
        let (extra, tokens) = self.condition(Ctx::new(&g, &self.store), z, &nulls, captions)?;
        Ok(CondCache {
            extra: extra.map(|v| (*v.value()).clone()),
            tokens: tokens.map(|v| (*v.value()).clone()),
        })
    }

    /// Unconditional branch: null embedding and empty captions.
    pub fn prepare_uncond(&self, batch: usize) -> Result<CondCache> {
        self.prepare(None, &vec![CaptionTokens::empty(); batch])
    }

    pub fn eps_cached(&self, x_t: &Tensor<f32>, t: usize, cache: &CondCache) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let b = x_t.shape()[0];
        let extra = cache.extra.clone().map(|e| g.constant(e));
        let tokens = cache.tokens.clone().map(|e| g.constant(e));
        let x = g.constant(x_t.clone());
        let ts = vec![t; b];
        let f = self.denoiser.forward(cx, x, &ts, extra, tokens)?;
        Ok((*self.skip(cx, x, &ts, f)?.value()).clone())
    }

    /// Samples images [B, 3, 16, 16] by guided DDIM, optionally from a given `x_T`.
    pub fn decode(
        &self,
        z: Option<&Tensor<f32>>,
        captions: &[CaptionTokens],
        opts: &DecodeOptions,
        rng: &mut Rng,
        x_t: Option<Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        if opts.guidance < 0.0 {
            return Err(Error::invalid("decode", format!("guidance scale {} must be >= 0", opts.guidance)));
        }
        let b = captions.len();
        let cond = self.prepare(z, captions)?;
        let uncond = self.prepare_uncond(b)?;
        let cond_fn = |x: &Tensor<f32>, t: usize| Ok(Prediction::Eps(self.eps_cached(x, t, &cond)?));
        let uncond_fn = |x: &Tensor<f32>, t: usize| Ok(Prediction::Eps(self.eps_cached(x, t, &uncond)?));
        let guided = Guided {
            cond: &cond_fn,
            uncond: &uncond_fn,
            scale: opts.guidance,
        };
        let shape = [b, 3, IMAGE_SIZE, IMAGE_SIZE];
        let x_init = match x_t {
            Some(x) if x.shape() == shape => x,
            Some(x) => return Err(Error::shape("decode", &shape, x.shape())),
            None => rng::normal(&shape, rng),
        };
        let sopts = SampleOptions {
            steps: opts.steps,
            eta: opts.eta,
            clip: None,
        };
        Ok(diffusion::sample_loop(&self.schedule, &guided, x_init, &sopts, rng)?.clamp(-1.0, 1.0))
    }

    /// DDIM-inverts images under the unguided conditional model.
    pub fn invert(&self, images: &Tensor<f32>, z: Option<&Tensor<f32>>, captions: &[CaptionTokens], steps: usize) -> Result<Tensor<f32>> {
        let cond = self.prepare(z, captions)?;
        let model = |x: &Tensor<f32>, t: usize| Ok(Prediction::Eps(self.eps_cached(x, t, &cond)?));
        diffusion::ddim_invert(&self.schedule, &model, images, steps)
    }

    /// Conditional denoiser view for use with the generic samplers.
    pub fn denoise_fn<'a>(&'a self, cache: &'a CondCache) -> impl Denoise<f32> + 'a {
        move |x: &Tensor<f32>, t: usize| Ok(Prediction::Eps(self.eps_cached(x, t, cache)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub guidance: f64,
    pub eta: f64,
    pub steps: usize,
}

pub struct DecoderTraining {
    pub model: DecoderModel,
    pub raw: Vec<Tensor<f32>>,
    pub losses: Vec<f32>,
}

/// Noise-prediction training with per-example conditioning dropout. `clip`
/// is only read.
pub fn train_decoder(
    config: DecoderConfig,
    optim: &OptimConfig,
    data: &[DatasetRecord],
    clip: &ClipModel,
    seed: u64,
) -> Result<DecoderTraining> {
    if data.is_empty() {
        return Err(Error::invalid("train_decoder", "empty dataset"));
    }
    let embeddings = clip.embed_images(&data.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
    let mut model = DecoderModel::new(config, seed)?;
    let mut trainer = Trainer::new(optim.clone(), &model.store)?;
    let mut rng = rng::stream(seed, "decoder.train");
    let dropout_rng = std::cell::RefCell::new(rng::stream(seed, "decoder.dropout"));
    let d = embeddings.shape()[1];
    let bs = optim.batch_size;
    for _ in 0..optim.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..data.len())).collect();
        let drops = sample_drops(bs, model.config.embed_drop, model.config.caption_drop, &mut rng);
        let t = model.schedule.sample_timesteps(bs, &mut rng);
        let noise = rng::normal::<f32>(&[bs, 3, IMAGE_SIZE, IMAGE_SIZE], &mut rng);
        let mut xt = Vec::with_capacity(bs);
        let mut z = Vec::with_capacity(bs * d);
        let mut captions = Vec::with_capacity(bs);
        for (k, &i) in idx.iter().enumerate() {
            xt.push(model.schedule.q_sample(&data[i].image, t[k], &noise.index0(k))?);
            z.extend_from_slice(&embeddings.data()[i * d..(i + 1) * d]);
            captions.push(if drops[k].1 { CaptionTokens::empty() } else { data[i].caption.clone() });
        }
        let z = Tensor::new(&[bs, d], z)?;
        let nulls: Vec<bool> = drops.iter().map(|p| p.0).collect();
        let g = Graph::new();
        let cx = Ctx::with_dropout(&g, &model.store, &dropout_rng);
        let pred = model.forward(cx, g.constant(Tensor::stack(&xt)?), &t, &z, &nulls, &captions)?;
        let loss = pred.sub(g.constant(noise))?.square()?.mean();
        let value = loss.value().item();
        let grads = g.backward(loss, &model.store)?;
        trainer.step(&mut model.store, grads, value)?;
    }
    let raw = model.store.snapshot();
    if optim.steps > 0 {
        model.store.load_from(trainer.ema())?;
    }
    Ok(DecoderTraining {
        model,
        raw,
        losses: trainer.losses,
    })
}
