//! Desk-scale two-stage text-to-image generation: a contrastive image/text
//! encoder, priors that map captions to image embeddings, and a diffusion
//! decoder that inverts the image encoder.

pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod manipulate;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

/// Single-precision aliases used by the trained models.
pub type Tensor = numerics::Tensor<f32>;
pub type Graph = numerics::Graph<f32>;
pub type ParamStore = numerics::ParamStore<f32>;
pub type Gradients = numerics::Gradients<f32>;
