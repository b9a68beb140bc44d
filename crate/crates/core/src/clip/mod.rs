//! Toy contrastive image/text encoder with a shared unit-sphere embedding space.

mod text;

use rand::seq::SliceRandom;

pub use text::TextEncoder;

use crate::data::{CaptionTokens, DatasetRecord, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, GroupNorm, Linear, TransformerConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};
use crate::train::{OptimConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct ClipConfig {
    pub embed_dim: usize,
    pub image_channels: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            image_channels: 32,
            text_width: 64,
            text_depth: 2,
            text_heads: 4,
        }
    }
}

const LOG_TEMP_MIN: f32 = -4.605_170_2; // ln(1/100)
const LOG_TEMP_MAX: f32 = 4.605_170_2; // ln(100)

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout, 8)?,
        })
    }

    fn forward<'g>(&self, cx: Ctx<'g, f32>, x: Var<'g, f32>) -> Result<Var<'g, f32>> {
        Ok(self.norm.forward(cx, self.conv.forward(cx, x)?)?.gelu())
    }
}

/// Convolutional image tower; two coordinate channels are appended to the
/// input so pooled features can still encode position.
#[derive(Clone, Debug)]
struct ImageEncoder {
    blocks: Vec<ConvBlock>,
    proj: Linear,
}

impl ImageEncoder {
    fn new(store: &mut ParamStore<f32>, c: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        let blocks = vec![
            ConvBlock::new(store, "clip.img.b0", 5, c, 1, rng)?,
            ConvBlock::new(store, "clip.img.b1", c, 2 * c, 2, rng)?,
            ConvBlock::new(store, "clip.img.b2", 2 * c, 2 * c, 1, rng)?,
            ConvBlock::new(store, "clip.img.b3", 2 * c, 4 * c, 2, rng)?,
            ConvBlock::new(store, "clip.img.b4", 4 * c, 4 * c, 1, rng)?,
            ConvBlock::new(store, "clip.img.b5", 4 * c, 4 * c, 2, rng)?,
        ];
        Ok(Self {
            blocks,
            proj: Linear::new(store, "clip.img.proj", 4 * c, out, rng),
        })
    }

    fn forward<'g>(&self, cx: Ctx<'g, f32>, images: Var<'g, f32>) -> Result<Var<'g, f32>> {
        let s = images.shape();
        let (b, h, w) = (s[0], s[2], s[3]);
        let mut coords = Vec::with_capacity(b * 2 * h * w);
        for _ in 0..b {
            for _ in 0..h {
                for x in 0..w {
                    coords.push(2.0 * (x as f32 + 0.5) / w as f32 - 1.0);
                }
            }
            for y in 0..h {
                for _ in 0..w {
                    coords.push(2.0 * (y as f32 + 0.5) / h as f32 - 1.0);
                }
            }
        }
        let coords = cx.g.constant(Tensor::new(&[b, 2, h, w], coords)?);
        let mut x = cx.g.concat(&[images, coords], 1)?;
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        let s = x.shape();
        let pooled = x.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_last()?;
        self.proj.forward(cx, pooled)
    }
}

/// Frozen after training; every embedding is L2-normalized.
#[derive(Clone, Debug)]
pub struct ClipModel {
    pub config: ClipConfig,
    pub store: ParamStore<f32>,
    image: ImageEncoder,
    text: TextEncoder,
    text_proj: Linear,
    log_temp: ParamId,
}

impl ClipModel {
    pub fn new(config: ClipConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "clip.init");
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, config.image_channels, config.embed_dim, &mut rng)?;
        let text = TextEncoder::new(
            &mut store,
            "clip.text",
            TransformerConfig {
                width: config.text_width,
                depth: config.text_depth,
                heads: config.text_heads,
                context_length: crate::data::CONTEXT_LENGTH,
                causal: true,
            },
            &mut rng,
        )?;
        let text_proj = Linear::new(&mut store, "clip.text.proj", config.text_width, config.embed_dim, &mut rng);
        let log_temp = store.add("clip.log_temp", Tensor::from_vec(vec![(1.0f32 / 0.07).ln()]));
        Ok(Self {
            config,
            store,
            image,
            text,
            text_proj,
            log_temp,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn temperature_scale(&self) -> f32 {
        self.store.get(self.log_temp).item().exp()
    }

    /// Normalized image embeddings on the tape, [B, D].
    pub fn image_features<'g>(&self, cx: Ctx<'g, f32>, images: Var<'g, f32>) -> Result<Var<'g, f32>> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::invalid("embed_image", format!("expected [B, 3, 16, 16], got {s:?}")));
        }
        self.image.forward(cx, images)?.l2_normalize(1e-12)
    }

    /// Normalized text embeddings on the tape, [B, D].
    pub fn text_features<'g>(&self, cx: Ctx<'g, f32>, captions: &[CaptionTokens]) -> Result<Var<'g, f32>> {
        let (_, pooled) = self.text.forward(cx, captions)?;
        self.text_proj.forward(cx, pooled)?.l2_normalize(1e-12)
    }

    pub fn embed_images(&self, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let g = Graph::inference();
            let x = g.constant(Tensor::stack(chunk)?);
            out.push((*self.image_features(Ctx::new(&g, &self.store), x)?.value()).clone());
        }
        if out.is_empty() {
            return Ok(Tensor::zeros(&[0, self.embed_dim()]));
        }
        Tensor::cat0(&out)
    }

    pub fn embed_image(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::invalid("embed_image", format!("expected [3, 16, 16], got {:?}", image.shape())));
        }
        Ok(self.embed_images(std::slice::from_ref(image))?.index0(0))
    }

    pub fn embed_texts(&self, captions: &[CaptionTokens]) -> Result<Tensor<f32>> {
        let mut out = Vec::with_capacity(captions.len());
        for chunk in captions.chunks(256) {
            let g = Graph::inference();
            out.push((*self.text_features(Ctx::new(&g, &self.store), chunk)?.value()).clone());
        }
        if out.is_empty() {
            return Ok(Tensor::zeros(&[0, self.embed_dim()]));
        }
        Tensor::cat0(&out)
    }

    pub fn embed_text(&self, caption: &CaptionTokens) -> Result<Tensor<f32>> {
        Ok(self.embed_texts(std::slice::from_ref(caption))?.index0(0))
    }

    /// Symmetric cross-entropy over scaled cosine similarities.
    pub fn contrastive_loss<'g>(
        &self,
        cx: Ctx<'g, f32>,
        images: Var<'g, f32>,
        captions: &[CaptionTokens],
    ) -> Result<Var<'g, f32>> {
        let b = captions.len();
        if b < 2 {
            return Err(Error::invalid("contrastive_loss", "batch size must be at least 2"));
        }
        let zi = self.image_features(cx, images)?;
        let zt = self.text_features(cx, captions)?;
        let scale = cx.p(self.log_temp).exp();
        contrastive_from_features(zi, zt, scale)
    }
}

/// Symmetric InfoNCE given normalized features and a positive logit scale of shape [1].
pub fn contrastive_from_features<'g>(zi: Var<'g, f32>, zt: Var<'g, f32>, scale: Var<'g, f32>) -> Result<Var<'g, f32>> {
    let b = zi.shape()[0];
    let logits = zi.matmul_t(zt, false, true)?.mul(scale)?;
    let diag: Vec<usize> = (0..b).collect();
    let rows = logits.log_softmax()?.gather(&diag)?.mean();
    let cols = logits.transpose(0, 1)?.log_softmax()?.gather(&diag)?.mean();
    Ok(rows.add(cols)?.scale(-0.5))
}

/// Random batch of records with pairwise distinct captions.
pub(crate) fn unique_caption_batch<'a>(data: &'a [DatasetRecord], size: usize, rng: &mut Rng) -> Vec<&'a DatasetRecord> {
    let mut seen = std::collections::HashSet::new();
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let mut out = Vec::with_capacity(size);
    for i in idx {
        if seen.insert(&data[i].caption) {
            out.push(&data[i]);
            if out.len() == size {
                break;
            }
        }
    }
    out
}

pub struct ClipTraining {
    pub model: ClipModel,
    /// Raw (non-averaged) weights at the end of training.
    pub raw: Vec<Tensor<f32>>,
    pub losses: Vec<f32>,
}

/// Trains from scratch; the returned model carries the EMA weights.
pub fn train_clip(config: ClipConfig, optim: &OptimConfig, data: &[DatasetRecord], seed: u64) -> Result<ClipTraining> {
    if data.is_empty() {
        return Err(Error::invalid("train_clip", "empty dataset"));
    }
    let mut model = ClipModel::new(config, seed)?;
    let mut trainer = Trainer::new(optim.clone(), &model.store)?;
    let mut rng = rng::stream(seed, "clip.batches");
    for _ in 0..optim.steps {
        let batch = unique_caption_batch(data, optim.batch_size, &mut rng);
        if batch.len() < 2 {
            return Err(Error::invalid("train_clip", "fewer than two distinct captions"));
        }
        let images = Tensor::stack(&batch.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
        let captions: Vec<CaptionTokens> = batch.iter().map(|r| r.caption.clone()).collect();
        let g = Graph::new();
        let loss = model.contrastive_loss(Ctx::new(&g, &model.store), g.constant(images), &captions)?;
        let value = loss.value().item();
        let grads = g.backward(loss, &model.store)?;
        trainer.step(&mut model.store, grads, value)?;
        let lt = model.store.get_mut(model.log_temp);
        lt.data_mut()[0] = lt.data()[0].clamp(LOG_TEMP_MIN, LOG_TEMP_MAX);
    }
    let raw = model.store.snapshot();
    if optim.steps > 0 {
        model.store.load_from(trainer.ema())?;
    }
    Ok(ClipTraining {
        model,
        raw,
        losses: trainer.losses,
    })
}

/// Fraction of captions whose own image is the most similar among `images`.
pub fn retrieval_top1(model: &ClipModel, images: &[Tensor<f32>], captions: &[CaptionTokens]) -> Result<f64> {
    let zi = model.embed_images(images)?;
    let zt = model.embed_texts(captions)?;
    let sims = zt.matmul(&zi.t()?)?;
    let n = captions.len();
    let hits = (0..n)
        .filter(|&r| {
            let row = &sims.data()[r * n..(r + 1) * n];
            (0..n).all(|c| c == r || row[c] < row[r])
        })
        .count();
    Ok(hits as f64 / n.max(1) as f64)
}
