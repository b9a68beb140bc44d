//! Priors `P(z_i | y)`: an autoregressive model over quantized PCA codes and
//! a diffusion model over continuous embeddings.

mod ar;
mod diffusion_prior;
mod pca;
mod quantize;

pub use ar::{train_ar_prior, ArPriorConfig, ArPriorModel, ArPriorTraining, ArSampleOptions, PREFIX_LEN, ZT_TOKENS};
pub use diffusion_prior::{
    embedding_scale, pixel_variance, train_diffusion_prior, DiffusionPriorConfig, DiffusionPriorModel,
    DiffusionPriorTraining, PriorSample, PriorSampleOptions,
};
pub use pca::{fit_pca, PcaBasis};
pub use quantize::QuantizerSpec;

use crate::clip::ClipModel;
use crate::data::DatasetRecord;
use crate::error::Result;
use crate::numerics::Tensor;

/// Frozen-encoder views of a dataset: image embeddings `z_i` and caption
/// embeddings `z_t`, both [N, D].
pub struct PairedEmbeddings {
    pub image: Tensor<f32>,
    pub text: Tensor<f32>,
}

impl PairedEmbeddings {
    pub fn compute(clip: &ClipModel, data: &[DatasetRecord]) -> Result<Self> {
        let image = clip.embed_images(&data.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
        let text = clip.embed_texts(&data.iter().map(|r| r.caption.clone()).collect::<Vec<_>>())?;
        Ok(Self { image, text })
    }

    /// Row-wise `z_i . z_t`.
    pub fn dots(&self) -> Vec<f64> {
        let d = self.image.shape()[1];
        self.image
            .data()
            .chunks(d)
            .zip(self.text.data().chunks(d))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum())
            .collect()
    }
}
