//! Manipulations of the bipartite latent `(z_i, x_T)`: variations,
//! interpolations, text diffs, and PCA truncation probes.

use std::str::FromStr;

use crate::clip::ClipModel;
use crate::data::CaptionTokens;
use crate::decoder::{DecodeOptions, DecoderModel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prior::PcaBasis;
use crate::rng::{self, Rng};

/// Below this angle slerp falls back to normalized lerp.
const SMALL_ANGLE: f64 = 1e-4;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid("slerp", format!("theta {theta} outside [0, 1]")));
    }
    Ok(())
}

/// Spherical interpolation between unit vectors.
pub fn slerp(a: &Tensor<f32>, b: &Tensor<f32>, theta: f64) -> Result<Tensor<f32>> {
    check_theta(theta)?;
    if a.shape() != b.shape() {
        return Err(Error::shape("slerp", a.shape(), b.shape()));
    }
    for v in [a, b] {
        if (v.norm() as f64 - 1.0).abs() > 1e-5 {
            return Err(Error::invalid("slerp", format!("endpoint norm {}", v.norm())));
        }
    }
    if theta == 0.0 {
        return Ok(a.clone());
    }
    if theta == 1.0 {
        return Ok(b.clone());
    }
    let cos = dot(a.data(), b.data()).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if std::f64::consts::PI - omega < SMALL_ANGLE {
        return Err(Error::invalid("slerp", "antipodal endpoints"));
    }
    if omega < SMALL_ANGLE {
        let out = a.scale((1.0 - theta) as f32).add(&b.scale(theta as f32))?;
        return Ok(out.normalized());
    }
    let s = omega.sin();
    let (wa, wb) = (((1.0 - theta) * omega).sin() / s, (theta * omega).sin() / s);
    Ok(a.scale(wa as f32).add(&b.scale(wb as f32))?.normalized())
}

/// Slerp of arbitrary vectors, using the angle between their directions.
/// Used for Gaussian latents, whose norms concentrate but are not one.
pub fn slerp_latent(a: &Tensor<f32>, b: &Tensor<f32>, theta: f64) -> Result<Tensor<f32>> {
    check_theta(theta)?;
    if a.shape() != b.shape() {
        return Err(Error::shape("slerp_latent", a.shape(), b.shape()));
    }
    let (na, nb) = (a.norm() as f64, b.norm() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("slerp_latent", "zero endpoint"));
    }
    let omega = (dot(a.data(), b.data()) / (na * nb)).clamp(-1.0, 1.0).acos();
    let (wa, wb) = if omega < SMALL_ANGLE {
        (1.0 - theta, theta)
    } else {
        let s = omega.sin();
        (((1.0 - theta) * omega).sin() / s, (theta * omega).sin() / s)
    };
    a.scale(wa as f32).add(&b.scale(wb as f32))
}

/// `n` evenly spaced values from 0 to `max` inclusive.
pub fn theta_grid(max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|j| max * j as f64 / (n - 1) as f64).collect(),
    }
}

/// Decoder settings shared by the manipulations. Inversion always uses the
/// unguided conditional model; `guidance` applies to decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipulateOptions {
    pub steps: usize,
    pub guidance: f64,
    /// Caption shown to the decoder; empty means image-embedding only.
    pub caption: CaptionTokens,
}

impl Default for ManipulateOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 1.0,
            caption: CaptionTokens::empty(),
        }
    }
}

/// The model pair every manipulation needs.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub clip: &'a ClipModel,
    pub decoder: &'a DecoderModel,
}

fn batch(z: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(z)
}

impl Models<'_> {
    /// `(z_i, x_T)` for one image [3, H, W].
    pub fn encode(&self, image: &Tensor<f32>, opts: &ManipulateOptions) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let z = self.clip.embed_image(image)?;
        let zb = batch(&[z.clone()])?;
        let xb = batch(&[image.clone()])?;
        let xt = self.decoder.invert(&xb, Some(&zb), &[opts.caption.clone()], opts.steps)?;
        Ok((z, xt.index0(0)))
    }

    /// Deterministic decode of paired rows of `z` and `x_T`.
    pub fn decode(&self, z: &[Tensor<f32>], x_t: &[Tensor<f32>], eta: f64, opts: &ManipulateOptions, rng: &mut Rng) -> Result<Vec<Tensor<f32>>> {
        let caps = vec![opts.caption.clone(); z.len()];
        let dopts = DecodeOptions {
            guidance: opts.guidance,
            eta,
            steps: opts.steps,
        };
        let out = self.decoder.decode(Some(&batch(z)?), &caps, &dopts, rng, Some(batch(x_t)?))?;
        Ok(out.unstack())
    }
}

/// `n` decodes of `(z_i, x_T)` with stochasticity `eta`; `eta = 0` reconstructs.
pub fn variations(models: Models, image: &Tensor<f32>, eta: f64, n: usize, opts: &ManipulateOptions, rng: &mut Rng) -> Result<Vec<Tensor<f32>>> {
    if n == 0 {
        return Err(Error::invalid("variations", "n must be at least 1"));
    }
    if eta == 0.0 && n > 1 {
        log::warn!("variations with eta = 0 are all identical");
    }
    let (z, xt) = models.encode(image, opts)?;
    models.decode(&vec![z; n], &vec![xt; n], eta, opts, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// Slerp between the inverted latents of both images.
    Endpoints,
    /// One random latent shared by the whole row.
    Random,
}

impl FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endpoints" => Ok(Self::Endpoints),
            "random" => Ok(Self::Random),
            _ => Err(Error::invalid("latent_mode", format!("unknown mode {s:?}"))),
        }
    }
}

/// Frames along `theta = j / (num_steps - 1)` between two images.
pub fn interpolate(
    models: Models,
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    num_steps: usize,
    mode: LatentMode,
    opts: &ManipulateOptions,
    rng: &mut Rng,
) -> Result<Vec<Tensor<f32>>> {
    if num_steps < 2 {
        return Err(Error::invalid("interpolate", "num_steps must be at least 2"));
    }
    let thetas = theta_grid(1.0, num_steps);
    let (z1, z2, latents) = match mode {
        LatentMode::Endpoints => {
            let (z1, l1) = models.encode(x1, opts)?;
            let (z2, l2) = models.encode(x2, opts)?;
            let latents = thetas.iter().map(|&t| slerp_latent(&l1, &l2, t)).collect::<Result<Vec<_>>>()?;
            (z1, z2, latents)
        }
        LatentMode::Random => {
            let z1 = models.clip.embed_image(x1)?;
            let z2 = models.clip.embed_image(x2)?;
            let latent = rng::normal(x1.shape(), rng);
            (z1, z2, vec![latent; num_steps])
        }
    };
    let zs = thetas.iter().map(|&t| slerp(&z1, &z2, t)).collect::<Result<Vec<_>>>()?;
    models.decode(&zs, &latents, 0.0, opts, rng)
}

/// Result of a text-diff edit: frames and the embeddings that produced them.
#[derive(Clone, Debug)]
pub struct TextDiff {
    pub direction: Tensor<f32>,
    pub embeddings: Vec<Tensor<f32>>,
    pub frames: Vec<Tensor<f32>>,
}

/// Moves `z_i` toward the normalized caption-embedding difference, keeping `x_T` fixed.
pub fn text_diff(
    models: Models,
    image: &Tensor<f32>,
    caption_from: &CaptionTokens,
    caption_to: &CaptionTokens,
    thetas: &[f64],
    opts: &ManipulateOptions,
    rng: &mut Rng,
) -> Result<TextDiff> {
    if caption_from == caption_to {
        return Err(Error::invalid("text_diff", "captions are identical"));
    }
    let t0 = models.clip.embed_text(caption_from)?;
    let t1 = models.clip.embed_text(caption_to)?;
    let diff = t1.sub(&t0)?;
    if diff.norm() < 1e-6 {
        return Err(Error::invalid("text_diff", "caption embeddings coincide"));
    }
    let direction = diff.normalized();
    let (z, xt) = models.encode(image, opts)?;
    let embeddings = thetas.iter().map(|&t| slerp(&z, &direction, t)).collect::<Result<Vec<_>>>()?;
    let frames = models.decode(&embeddings, &vec![xt; thetas.len()], 0.0, opts, rng)?;
    Ok(TextDiff {
        direction,
        embeddings,
        frames,
    })
}

/// Decodes `z_i` reconstructed from its first `k` principal components, for each `k`.
pub fn pca_probe(models: Models, basis: &PcaBasis<f32>, image: &Tensor<f32>, ks: &[usize], opts: &ManipulateOptions, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let (z, xt) = models.encode(image, opts)?;
    let row = batch(&[z])?;
    let zs = ks
        .iter()
        .map(|&k| Ok(basis.reconstruct(&basis.project(&row, k)?)?.index0(0)))
        .collect::<Result<Vec<_>>>()?;
    models.decode(&zs, &vec![xt; ks.len()], 0.0, opts, &mut rng::stream(seed, "pca_probe"))
}
