use crate::data::{CaptionTokens, Tokenizer, CONTEXT_LENGTH};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Transformer, TransformerConfig};
use crate::numerics::{ParamId, ParamStore, Var};
use crate::rng::Rng;

/// Token + learned positional embeddings through a transformer.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    tokens: ParamId,
    positions: ParamId,
    transformer: Transformer,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore<f32>, name: &str, config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        let w = config.width;
        Ok(Self {
            tokens: store.add_uniform(format!("{name}.tok"), &[Tokenizer.vocab_size(), w], 0.1, rng),
            positions: store.add_uniform(format!("{name}.pos"), &[CONTEXT_LENGTH, w], 0.1, rng),
            transformer: Transformer::new(store, &format!("{name}.tf"), config, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.transformer.config.width
    }

    /// Per-token features [B, L, W] and the features at each end token [B, W].
    pub fn forward<'g>(&self, cx: Ctx<'g, f32>, captions: &[CaptionTokens]) -> Result<(Var<'g, f32>, Var<'g, f32>)> {
        let b = captions.len();
        let w = self.width();
        let mut ids = Vec::with_capacity(b * CONTEXT_LENGTH);
        for c in captions {
            if c.ids.len() != CONTEXT_LENGTH {
                return Err(Error::invalid("text_encoder", format!("caption of {} tokens", c.ids.len())));
            }
            ids.extend_from_slice(&c.ids);
        }
        let tok = cx.g.embedding(cx.p(self.tokens), &ids)?.reshape(&[b, CONTEXT_LENGTH, w])?;
        let x = tok.add(cx.p(self.positions))?;
        let h = self.transformer.forward(cx, x)?;
        let ends: Vec<usize> = captions.iter().enumerate().map(|(i, c)| i * CONTEXT_LENGTH + c.end_position()).collect();
        let pooled = cx.g.embedding(h.reshape(&[b * CONTEXT_LENGTH, w])?, &ends)?;
        Ok((h, pooled))
    }
}
