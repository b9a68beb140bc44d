use rand::Rng as _;

use super::{fit_pca, PairedEmbeddings, PcaBasis, QuantizerSpec};
use crate::clip::ClipModel;
use crate::data::{CaptionTokens, DatasetRecord, Tokenizer, CONTEXT_LENGTH};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, Transformer, TransformerConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};
use crate::train::{OptimConfig, Trainer};

/// Prefix tokens projected from the caption embedding.
pub const ZT_TOKENS: usize = 4;
/// `[caption | z_t tokens | dot token]`.
pub const PREFIX_LEN: usize = CONTEXT_LENGTH + ZT_TOKENS + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArPriorConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub buckets: usize,
    pub dot_buckets: usize,
    /// Retain the fewest components whose reconstruction MSE is below this fraction of the variance.
    pub mse_fraction: f64,
    pub text_drop: f64,
}

impl Default for ArPriorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 4,
            heads: 4,
            buckets: 64,
            dot_buckets: 64,
            mse_fraction: 0.01,
            text_drop: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArSampleOptions {
    /// Zero or below selects the argmax code.
    pub temperature: f64,
    /// Logit-space classifier-free guidance; 1 disables the unconditional pass.
    pub guidance: f64,
}

impl Default for ArSampleOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            guidance: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArPriorModel {
    pub config: ArPriorConfig,
    pub store: ParamStore<f32>,
    pub pca: PcaBasis<f32>,
    pub quantizer: QuantizerSpec,
    pub dot_quantizer: QuantizerSpec,
    /// Training-set `z_i . z_t`, ascending.
    pub dot_values: Vec<f64>,
    text_tok: ParamId,
    code_tok: ParamId,
    dot_tok: ParamId,
    pos: ParamId,
    zt_proj: Linear,
    transformer: Transformer,
    head: Linear,
}

impl ArPriorModel {
    /// Fits PCA and quantizers on `pairs` and initializes the transformer.
    pub fn new(config: ArPriorConfig, pairs: &PairedEmbeddings, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.text_drop) || config.buckets < 2 || config.dot_buckets < 1 {
            return Err(Error::invalid("ar_prior", "bad bucket counts or drop rate"));
        }
        let pca = fit_pca(&pairs.image, config.mse_fraction)?;
        let k = pca.k;
        let coeffs = pca.project(&pairs.image, k)?;
        let coeffs: Vec<f64> = coeffs.data().iter().map(|&v| v as f64).collect();
        let quantizer = QuantizerSpec::fit(&coeffs, k, config.buckets)?;
        let mut dot_values = pairs.dots();
        dot_values.sort_by(f64::total_cmp);
        let dot_quantizer = QuantizerSpec::fit(&dot_values, 1, config.dot_buckets)?;
        Self::from_stats(config, pca, quantizer, dot_quantizer, dot_values, seed)
    }

    /// Initializes the transformer around already fitted statistics.
    pub fn from_stats(
        config: ArPriorConfig,
        pca: PcaBasis<f32>,
        quantizer: QuantizerSpec,
        dot_quantizer: QuantizerSpec,
        dot_values: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let k = pca.k;
        if quantizer.dims() != k || quantizer.buckets != config.buckets || dot_quantizer.dims() != 1 || dot_values.is_empty() {
            return Err(Error::invalid("ar_prior", "statistics do not match the config"));
        }
        let mut rng = rng::stream(seed, "ar_prior.init");
        let mut store = ParamStore::new();
        let w = config.width;
        let d = pca.dim();
        let tcfg = TransformerConfig {
            width: w,
            depth: config.depth,
            heads: config.heads,
            context_length: PREFIX_LEN + k,
            causal: true,
        };
        Ok(Self {
            text_tok: store.add_uniform("ar.text_tok", &[Tokenizer.vocab_size(), w], 0.1, &mut rng),
            code_tok: store.add_uniform("ar.code_tok", &[config.buckets, w], 0.1, &mut rng),
            dot_tok: store.add_uniform("ar.dot_tok", &[config.dot_buckets, w], 0.1, &mut rng),
            pos: store.add_uniform("ar.pos", &[PREFIX_LEN + k, w], 0.1, &mut rng),
            zt_proj: Linear::new(&mut store, "ar.zt_proj", d, ZT_TOKENS * w, &mut rng),
            transformer: Transformer::new(&mut store, "ar.tf", tcfg, &mut rng)?,
            head: Linear::zeros(&mut store, "ar.head", w, config.buckets),
            config,
            store,
            pca,
            quantizer,
            dot_quantizer,
            dot_values,
        })
    }

    /// Number of code tokens per embedding.
    pub fn k(&self) -> usize {
        self.pca.k
    }

    pub fn sequence_len(&self) -> usize {
        PREFIX_LEN + self.k()
    }

    /// Quantized PCA codes of embeddings [N, D].
    pub fn encode(&self, z: &Tensor<f32>) -> Result<Vec<Vec<usize>>> {
        let k = self.k();
        let coeffs = self.pca.project(z, k)?;
        coeffs
            .data()
            .chunks(k)
            .map(|row| self.quantizer.quantize(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect()
    }

    /// Unit embeddings [N, D] from code rows.
    pub fn decode_codes(&self, codes: &[Vec<usize>]) -> Result<Tensor<f32>> {
        let k = self.k();
        let mut flat = Vec::with_capacity(codes.len() * k);
        for row in codes {
            flat.extend(self.quantizer.dequantize(row)?.into_iter().map(|v| v as f32));
        }
        self.pca.reconstruct(&Tensor::new(&[codes.len(), k], flat)?)
    }

    pub fn dot_token(&self, dot: f64) -> usize {
        self.dot_quantizer.quantize_one(0, dot)
    }

    /// Median of the training dot products.
    pub fn dot_median(&self) -> f64 {
        self.dot_values[self.dot_values.len() / 2]
    }

    /// Dot-product token drawn from the upper half of the training distribution.
    pub fn sample_dot_token(&self, rng: &mut Rng) -> usize {
        let n = self.dot_values.len();
        self.dot_token(self.dot_values[rng.random_range(n / 2..n)])
    }

    /// Logits [B, n + 1, buckets] predicting `code_1 ..= code_{n+1}` from the
    /// prefix and the first `n` codes of each row.
    pub fn forward<'g>(
        &self,
        cx: Ctx<'g, f32>,
        captions: &[CaptionTokens],
        zt: &Tensor<f32>,
        dot_tokens: &[usize],
        codes: &[Vec<usize>],
    ) -> Result<Var<'g, f32>> {
        let b = captions.len();
        let w = self.config.width;
        let n = codes.first().map_or(0, Vec::len);
        if zt.shape() != [b, self.pca.dim()] || dot_tokens.len() != b || codes.len() != b || n > self.k() {
            return Err(Error::invalid("ar_prior", format!("inconsistent batch of {b}")));
        }
        let mut text_ids = Vec::with_capacity(b * CONTEXT_LENGTH);
        for c in captions {
            if c.ids.len() != CONTEXT_LENGTH {
                return Err(Error::invalid("ar_prior", format!("caption of {} tokens", c.ids.len())));
            }
            text_ids.extend_from_slice(&c.ids);
        }
        let mut parts = vec![
            cx.g.embedding(cx.p(self.text_tok), &text_ids)?.reshape(&[b, CONTEXT_LENGTH, w])?,
            self.zt_proj
                .forward(cx, cx.g.constant(zt.clone()))?
                .reshape(&[b, ZT_TOKENS, w])?,
            cx.g.embedding(cx.p(self.dot_tok), dot_tokens)?.reshape(&[b, 1, w])?,
        ];
        if n > 0 {
            let mut ids = Vec::with_capacity(b * n);
            for row in codes {
                if row.len() != n {
                    return Err(Error::invalid("ar_prior", "ragged code rows"));
                }
                ids.extend_from_slice(row);
            }
            parts.push(cx.g.embedding(cx.p(self.code_tok), &ids)?.reshape(&[b, n, w])?);
        }
        let len = PREFIX_LEN + n;
        let x = cx.g.concat(&parts, 1)?.add(cx.p(self.pos).slice(0, 0, len)?)?;
        let h = self.transformer.forward(cx, x)?;
        let outputs = (n + 1).min(self.k());
        let h = h.slice(1, PREFIX_LEN - 1, outputs)?;
        self.head.forward(cx, h)
    }

    /// Mean next-code cross-entropy with teacher forcing.
    pub fn loss<'g>(
        &self,
        cx: Ctx<'g, f32>,
        captions: &[CaptionTokens],
        zt: &Tensor<f32>,
        dot_tokens: &[usize],
        codes: &[Vec<usize>],
    ) -> Result<Var<'g, f32>> {
        let b = captions.len();
        let k = self.k();
        if codes.iter().any(|c| c.len() != k) {
            return Err(Error::invalid("ar_prior", format!("training rows need {k} codes")));
        }
        let logits = self.forward(cx, captions, zt, dot_tokens, codes)?;
        let targets: Vec<usize> = codes.iter().flatten().copied().collect();
        let lp = logits.reshape(&[b * k, self.config.buckets])?.log_softmax()?;
        Ok(lp.gather(&targets)?.mean().scale(-1.0))
    }

    /// Next-code logits [B, buckets] given the prefix and the codes so far.
    fn next_logits(&self, captions: &[CaptionTokens], zt: &Tensor<f32>, dots: &[usize], codes: &[Vec<usize>]) -> Result<Vec<f32>> {
        let g = Graph::inference();
        let logits = self.forward(Ctx::new(&g, &self.store), captions, zt, dots, codes)?;
        let s = logits.shape();
        let last = logits.slice(1, s[1] - 1, 1)?;
        Ok(last.value().data().to_vec())
    }

    /// Samples unit embeddings [B, D] for captions with caption embeddings `zt`.
    pub fn sample(&self, captions: &[CaptionTokens], zt: &Tensor<f32>, opts: &ArSampleOptions, rng: &mut Rng) -> Result<Tensor<f32>> {
        if opts.guidance < 0.0 {
            return Err(Error::invalid("ar_prior", format!("guidance scale {} must be >= 0", opts.guidance)));
        }
        let b = captions.len();
        let nb = self.config.buckets;
        let dots: Vec<usize> = (0..b).map(|_| self.sample_dot_token(rng)).collect();
        let null_caps = vec![CaptionTokens::empty(); b];
        let null_zt = Tensor::zeros(zt.shape());
        let mut codes: Vec<Vec<usize>> = vec![Vec::with_capacity(self.k()); b];
        for _ in 0..self.k() {
            let mut logits = self.next_logits(captions, zt, &dots, &codes)?;
            if opts.guidance != 1.0 {
                let u = self.next_logits(&null_caps, &null_zt, &dots, &codes)?;
                let s = opts.guidance as f32;
                logits.iter_mut().zip(&u).for_each(|(c, u)| *c = u + s * (*c - u));
            }
            for (row, l) in codes.iter_mut().zip(logits.chunks(nb)) {
                row.push(pick(l, opts.temperature, rng));
            }
        }
        self.decode_codes(&codes)
    }

    /// Embeds the captions with `clip` and samples.
    pub fn sample_captions(&self, clip: &ClipModel, captions: &[CaptionTokens], opts: &ArSampleOptions, rng: &mut Rng) -> Result<Tensor<f32>> {
        self.sample(captions, &clip.embed_texts(captions)?, opts, rng)
    }
}

fn pick(logits: &[f32], temperature: f64, rng: &mut Rng) -> usize {
    let argmax = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    if temperature <= 0.0 {
        return argmax;
    }
    let top = logits[argmax] as f64;
    let w: Vec<f64> = logits.iter().map(|&l| ((l as f64 - top) / temperature).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, v) in w.iter().enumerate() {
        u -= v;
        if u <= 0.0 {
            return i;
        }
    }
    argmax
}

pub struct ArPriorTraining {
    pub model: ArPriorModel,
    pub raw: Vec<Tensor<f32>>,
    pub losses: Vec<f32>,
}

/// Teacher-forced training on the frozen encoder's embeddings of `data`.
pub fn train_ar_prior(
    config: ArPriorConfig,
    optim: &OptimConfig,
    data: &[DatasetRecord],
    clip: &ClipModel,
    seed: u64,
) -> Result<ArPriorTraining> {
    if data.is_empty() {
        return Err(Error::invalid("train_ar_prior", "empty dataset"));
    }
    let pairs = PairedEmbeddings::compute(clip, data)?;
    let mut model = ArPriorModel::new(config, &pairs, seed)?;
    let codes = model.encode(&pairs.image)?;
    let dots: Vec<usize> = pairs.dots().iter().map(|&v| model.dot_token(v)).collect();
    let mut trainer = Trainer::new(optim.clone(), &model.store)?;
    let mut rng = rng::stream(seed, "ar_prior.train");
    let d = pairs.text.shape()[1];
    let bs = optim.batch_size;
    for _ in 0..optim.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..data.len())).collect();
        let mut captions = Vec::with_capacity(bs);
        let mut zt = Vec::with_capacity(bs * d);
        for &i in &idx {
            if rng.random_bool(model.config.text_drop) {
                captions.push(CaptionTokens::empty());
                zt.extend(std::iter::repeat_n(0.0, d));
            } else {
                captions.push(data[i].caption.clone());
                zt.extend_from_slice(&pairs.text.data()[i * d..(i + 1) * d]);
            }
        }
        let batch_codes: Vec<Vec<usize>> = idx.iter().map(|&i| codes[i].clone()).collect();
        let batch_dots: Vec<usize> = idx.iter().map(|&i| dots[i]).collect();
        let g = Graph::new();
        let loss = model.loss(Ctx::new(&g, &model.store), &captions, &Tensor::new(&[bs, d], zt)?, &batch_dots, &batch_codes)?;
        let value = loss.value().item();
        let grads = g.backward(loss, &model.store)?;
        trainer.step(&mut model.store, grads, value)?;
    }
    let raw = model.store.snapshot();
    if optim.steps > 0 {
        model.store.load_from(trainer.ema())?;
    }
    Ok(ArPriorTraining {
        model,
        raw,
        losses: trainer.losses,
    })
}
