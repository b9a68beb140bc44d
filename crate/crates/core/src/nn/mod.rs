//! Reusable layers: linear, convolution, normalization, attention,
//! transformer blocks, timestep embeddings, and a U-shaped denoiser.

mod attention;
mod denoiser;
mod layers;
mod timestep;
mod transformer;

use std::cell::RefCell;

pub use attention::{attention, MultiHeadAttention};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear, Mlp};
pub use timestep::{timestep_embed, timestep_embed_batch};
pub use transformer::{Transformer, TransformerBlock, TransformerConfig};

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::rng::Rng;

/// Everything a forward pass needs: the tape, parameter values, and an
/// optional dropout stream (absent at inference).
#[derive(Clone, Copy)]
pub struct Ctx<'g, T> {
    pub g: &'g Graph<T>,
    pub store: &'g ParamStore<T>,
    pub rng: Option<&'g RefCell<Rng>>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(g: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self { g, store, rng: None }
    }

    pub fn with_dropout(g: &'g Graph<T>, store: &'g ParamStore<T>, rng: &'g RefCell<Rng>) -> Self {
        Self { g, store, rng: Some(rng) }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.g.param(self.store, id)
    }

    pub fn dropout(&self, x: Var<'g, T>, rate: f64) -> Result<Var<'g, T>> {
        match self.rng {
            Some(rng) if rate > 0.0 => x.dropout(rate, &mut *rng.borrow_mut()),
            _ => Ok(x),
        }
    }
}

/// Fan-in scaled uniform bound.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
