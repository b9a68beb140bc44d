use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Mlp, MultiHeadAttention};
use crate::numerics::{ParamStore, Scalar, Var};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub context_length: usize,
    pub causal: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("transformer", "depth must be at least 1"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(
                "transformer",
                format!("width {} not divisible by {} heads", self.width, self.heads),
            ));
        }
        Ok(())
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, None, false, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, 4 * width, rng),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>, causal: bool) -> Result<Var<'g, T>> {
        let h = self.attn.forward(cx, self.ln1.forward(cx, x)?, None, causal)?;
        let x = x.add(h)?;
        let h = self.mlp.forward(cx, self.ln2.forward(cx, x)?)?;
        x.add(h)
    }
}

/// Stack of blocks plus a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
}

impl Transformer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), config.width, config.heads, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), config.width);
        Ok(Self { config, blocks, ln_f })
    }

    /// `x`: [B, L, width] with `L <= context_length`.
    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.width {
            return Err(Error::invalid("transformer", format!("input shape {s:?}")));
        }
        if s[1] > self.config.context_length {
            return Err(Error::invalid(
                "transformer",
                format!("sequence of {} exceeds context {}", s[1], self.config.context_length),
            ));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(cx, h, self.config.causal)?;
        }
        self.ln_f.forward(cx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};
    use crate::rng;

    fn model(causal: bool) -> (ParamStore<f64>, Transformer) {
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            width: 8,
            depth: 2,
            heads: 2,
            context_length: 5,
            causal,
        };
        let t = Transformer::new(&mut store, "t", cfg, &mut rng::stream(3, "init")).unwrap();
        (store, t)
    }

    #[test]
    fn causal_output_ignores_future_inputs() {
        let (store, t) = model(true);
        let x = rng::normal::<f64>(&[1, 5, 8], &mut rng::stream(1, "x"));
        let mut y = x.clone();
        for v in &mut y.data_mut()[3 * 8..] {
            *v += 1.5;
        }
        let run = |input: Tensor<f64>| {
            let g = Graph::inference();
            t.forward(Ctx::new(&g, &store), g.constant(input)).unwrap().value().data().to_vec()
        };
        let (a, b) = (run(x), run(y));
        assert_eq!(&a[..3 * 8], &b[..3 * 8]);
        assert_ne!(&a[3 * 8..], &b[3 * 8..]);
    }

    #[test]
    fn over_long_context_rejected() {
        let (store, t) = model(false);
        let g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 6, 8]));
        assert!(t.forward(Ctx::new(&g, &store), x).is_err());
    }

    #[test]
    fn width_must_divide_heads() {
        let cfg = TransformerConfig {
            width: 10,
            depth: 1,
            heads: 3,
            context_length: 4,
            causal: false,
        };
        assert!(cfg.validate().is_err());
    }
}
