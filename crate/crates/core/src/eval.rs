//! Evaluation: Fréchet distance on embedding statistics, CLIP-score, the
//! pairwise-preference probe, binomial intervals, and guidance sweeps.

use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::clip::ClipModel;
use crate::data::CaptionTokens;
use crate::decoder::{DecodeOptions, DecoderModel};
use crate::error::{Error, Result};
use crate::linalg::{sqrt_psd, symmetric_eigen};
use crate::numerics::Tensor;
use crate::rng;

const PSD_TOL: f64 = 1e-6;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Tensor<f64>,
    /// [D, D], unbiased.
    pub covariance: Tensor<f64>,
}

impl GaussianStats {
    pub fn new(mean: Tensor<f64>, covariance: Tensor<f64>) -> Result<Self> {
        let d = mean.numel();
        if covariance.shape() != [d, d] {
            return Err(Error::shape("gaussian_stats", &[d, d], covariance.shape()));
        }
        Ok(Self { mean, covariance })
    }

    /// Statistics of rows of `x` [N, D], N >= 2.
    pub fn from_features(x: &Tensor<f32>) -> Result<Self> {
        if x.rank() != 2 || x.shape()[0] < 2 {
            return Err(Error::invalid("gaussian_stats", format!("need [N >= 2, D], got {:?}", x.shape())));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64 / n as f64);
        }
        let mut cov = vec![0.0; d * d];
        for row in x.data().chunks(d) {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j] / (n - 1) as f64;
                }
            }
        }
        Self::new(Tensor::from_vec(mean), Tensor::new(&[d, d], cov)?)
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the product root is taken as `tr sqrt(A^(1/2) S_b A^(1/2))`
/// with `A = S_a`, which is symmetric and has the same eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let mean_term: f64 = a.mean.data().iter().zip(b.mean.data()).map(|(x, y)| (x - y).powi(2)).sum();
    let root_a = sqrt_psd(&a.covariance, PSD_TOL)?;
    sqrt_psd(&b.covariance, PSD_TOL)?;
    let m = root_a.matmul(&b.covariance)?.matmul(&root_a)?;
    let eig = symmetric_eigen(&m)?;
    let top = eig.values.first().copied().unwrap_or(0.0).abs();
    let mut tr_root = 0.0;
    for &l in &eig.values {
        if l < -PSD_TOL * top.max(1e-300) {
            return Err(Error::invalid("frechet_distance", format!("product has eigenvalue {l:e}")));
        }
        tr_root += l.max(0.0).sqrt();
    }
    let trace = |t: &Tensor<f64>| (0..t.shape()[0]).map(|i| t.data()[i * t.shape()[0] + i]).sum::<f64>();
    Ok((mean_term + trace(&a.covariance) + trace(&b.covariance) - 2.0 * tr_root).max(0.0))
}

/// Mean cosine between image and caption embeddings, pairwise.
pub fn clip_score(clip: &ClipModel, images: &[Tensor<f32>], captions: &[CaptionTokens]) -> Result<f64> {
    if images.is_empty() || images.len() != captions.len() {
        return Err(Error::invalid("clip_score", format!("{} images, {} captions", images.len(), captions.len())));
    }
    let zi = clip.embed_images(images)?;
    let zt = clip.embed_texts(captions)?;
    Ok(mean_row_cosine(&zi, &zt))
}

/// Mean row-wise dot product of two [N, D] unit-row matrices.
pub fn mean_row_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let d = a.shape()[1];
    let n = a.shape()[0];
    a.data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (*p as f64) * (*q as f64)).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

/// One preference judgement: `prefer_y` is true when `y` won.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub prefer_y: bool,
}

/// Linear score `f(v) = w . v`; `P(prefer y) = 1 / (1 + exp(f(x) - f(y)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceProbe {
    pub w: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl PreferenceProbe {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim] }
    }

    pub fn score(&self, v: &[f64]) -> f64 {
        self.w.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn prob_prefer_y(&self, x: &[f64], y: &[f64]) -> f64 {
        1.0 / (1.0 + (self.score(x) - self.score(y)).exp())
    }

    /// Mean negative log-likelihood.
    pub fn loss(&self, pairs: &[PreferencePair]) -> f64 {
        let n = pairs.len().max(1) as f64;
        pairs
            .iter()
            .map(|p| {
                let m = self.score(&p.y) - self.score(&p.x);
                let s = if p.prefer_y { m } else { -m };
                // -log sigmoid(s), stable for both signs.
                (-s).max(0.0) + (-s.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / n
    }

    pub fn accuracy(&self, pairs: &[PreferencePair]) -> f64 {
        let hits = pairs.iter().filter(|p| (self.prob_prefer_y(&p.x, &p.y) > 0.5) == p.prefer_y).count();
        hits as f64 / pairs.len().max(1) as f64
    }

    /// Logistic regression on `y - x` by full-batch gradient descent.
    pub fn fit(pairs: &[PreferencePair], steps: usize, lr: f64) -> Result<Self> {
        let dim = pairs.first().map_or(0, |p| p.x.len());
        if dim == 0 || pairs.iter().any(|p| p.x.len() != dim || p.y.len() != dim) {
            return Err(Error::invalid("preference_probe", "empty or ragged pairs"));
        }
        let wins = pairs.iter().filter(|p| p.prefer_y).count();
        if wins == 0 || wins == pairs.len() {
            return Err(Error::invalid("preference_probe", "labels are all the same"));
        }
        let diffs: Vec<Vec<f64>> = pairs.iter().map(|p| p.y.iter().zip(&p.x).map(|(a, b)| a - b).collect()).collect();
        let mut probe = Self::zeros(dim);
        let n = pairs.len() as f64;
        for _ in 0..steps {
            let mut grad = vec![0.0; dim];
            for (d, p) in diffs.iter().zip(pairs) {
                let target = if p.prefer_y { 1.0 } else { 0.0 };
                let err = sigmoid(probe.score(d)) - target;
                grad.iter_mut().zip(d).for_each(|(g, v)| *g += err * v / n);
            }
            probe.w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
        }
        Ok(probe)
    }
}

/// Peak signal-to-noise ratio in dB for images in [-1, 1] (peak-to-peak 2).
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(10.0 * (4.0 / mse).log10())
}

/// Normal-approximation binomial interval `p ± z sqrt(p (1 - p) / n)`, clipped to [0, 1].
pub fn normal_approx_interval(wins: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || wins > n || !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid("interval", format!("wins={wins}, n={n}, confidence={confidence}")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    let p = wins as f64 / n as f64;
    let half = z * (p * (1.0 - p) / n as f64).sqrt();
    Ok(((p - half).max(0.0), (p + half).min(1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scale: f64,
    pub frechet: f64,
    pub clip_score: f64,
}

/// Decodes fixed embeddings at each decoder guidance scale, with the same
/// starting noise, and scores the results against `reference`.
pub fn guidance_sweep(
    decoder: &DecoderModel,
    clip: &ClipModel,
    embeddings: Option<&Tensor<f32>>,
    captions: &[CaptionTokens],
    reference: &GaussianStats,
    scales: &[f64],
    steps: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if captions.len() < 2 {
        return Err(Error::invalid("guidance_sweep", "need at least two prompts"));
    }
    let shape = [captions.len(), 3, crate::data::IMAGE_SIZE, crate::data::IMAGE_SIZE];
    let x_t = rng::normal::<f32>(&shape, &mut rng::stream(seed, "sweep.noise"));
    scales
        .iter()
        .map(|&scale| {
            let opts = DecodeOptions {
                guidance: scale,
                eta: 0.0,
                steps,
            };
            let mut r = rng::stream(seed, "sweep.decode");
            let images = decoder.decode(embeddings, captions, &opts, &mut r, Some(x_t.clone()))?.unstack();
            let feats = clip.embed_images(&images)?;
            Ok(SweepRow {
                scale,
                frechet: frechet_distance(&GaussianStats::from_features(&feats)?, reference)?,
                clip_score: mean_row_cosine(&feats, &clip.embed_texts(captions)?),
            })
        })
        .collect()
}

/// Comma-separated table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let table: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.scale, r.frechet, r.clip_score]).collect();
    write_csv(path, &["scale", "frechet", "clip_score"], &table)
}

/// Minimal SVG line chart of named series of `(x, y)` points.
pub fn svg_line_plot(series: &[(String, Vec<(f64, f64)>)], x_label: &str, y_label: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{y_label}</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(s, r#"<text x="{M}" y="{}" text-anchor="middle">{x0:.3}</text>"#, H - M + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, W - M, H - M + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, M - 4.0, H - M);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, M - 4.0, M + 4.0);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, W - M + 4.0 - 90.0, M + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Scores of a batch of decodes against captions and reference statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeScores {
    pub clip_score: f64,
    pub frechet: f64,
}

/// Decodes `embeddings` (or the null embedding) for `captions` and scores the images.
pub fn decode_and_score(
    decoder: &DecoderModel,
    clip: &ClipModel,
    embeddings: Option<&Tensor<f32>>,
    captions: &[CaptionTokens],
    opts: &DecodeOptions,
    reference: &GaussianStats,
    seed: u64,
) -> Result<(Vec<Tensor<f32>>, DecodeScores)> {
    let mut r = rng::stream(seed, "score.decode");
    let images = decoder.decode(embeddings, captions, opts, &mut r, None)?.unstack();
    let feats = clip.embed_images(&images)?;
    let scores = DecodeScores {
        clip_score: mean_row_cosine(&feats, &clip.embed_texts(captions)?),
        frechet: frechet_distance(&GaussianStats::from_features(&feats)?, reference)?,
    };
    Ok((images, scores))
}
