//! Pixel-level scene probe: nearest-palette segmentation of rendered or
//! generated images into background and colored blobs.

use crate::data::scene::{Background, Color, Scene, Shape};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub color: Color,
    pub pixels: usize,
    /// Pixel count over bounding-box area.
    pub fill: f64,
    pub centroid: (f64, f64),
}

impl Blob {
    /// Shape guess from how much of its bounding box the blob fills.
    pub fn shape(&self) -> Shape {
        if self.fill > 0.9 {
            Shape::Square
        } else if self.fill > 0.66 {
            Shape::Circle
        } else {
            Shape::Triangle
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub background: Background,
    /// Fraction of all pixels nearest to each object color.
    pub color_fractions: [f64; 6],
    /// Connected blobs, largest first, ignoring specks.
    pub blobs: Vec<Blob>,
}

impl Analysis {
    pub fn color_score(&self, c: Color) -> f64 {
        self.color_fractions[c.index()]
    }

    /// Whether object count, colors and shapes agree with `scene` (as multisets).
    pub fn agrees_with(&self, scene: &Scene) -> (bool, bool, bool) {
        let count = self.blobs.len() == scene.objects.len();
        let mut want_c: Vec<_> = scene.objects.iter().map(|o| o.color).collect();
        let mut got_c: Vec<_> = self.blobs.iter().map(|b| b.color).collect();
        want_c.sort();
        got_c.sort();
        let mut want_s: Vec<_> = scene.objects.iter().map(|o| o.shape).collect();
        let mut got_s: Vec<_> = self.blobs.iter().map(|b| b.shape()).collect();
        want_s.sort();
        got_s.sort();
        (count, count && want_c == got_c, count && want_s == got_s)
    }
}

const BG: usize = 3;

fn palette() -> Vec<[f64; 3]> {
    let to = |rgb: [u8; 3]| rgb.map(|v| v as f64 / 127.5 - 1.0);
    Color::ALL
        .iter()
        .map(|c| to(c.rgb()))
        .chain(Background::ALL.iter().map(|b| to(b.rgb())))
        .collect()
}

/// Segments a [3, H, W] image in [-1, 1].
pub fn analyze<T: Scalar>(img: &Tensor<T>) -> Result<Analysis> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("probe", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let pal = palette();
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            let px = [0, 1, 2].map(|c| img.data()[c * n + i].to_f64_lossy());
            (0..pal.len())
                .min_by(|&a, &b| {
                    let d = |k: usize| (0..3).map(|c| (px[c] - pal[k][c]).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap()
        })
        .collect();

    let mut color_fractions = [0.0; 6];
    let mut bg_votes = [0usize; BG];
    for &l in &labels {
        if l < 6 {
            color_fractions[l] += 1.0 / n as f64;
        } else {
            bg_votes[l - 6] += 1;
        }
    }
    let bg = (0..BG).max_by_key(|&b| bg_votes[b]).unwrap();

    let mut seen = vec![false; n];
    let mut blobs = Vec::new();
    let min_pixels = (n / 64).max(2);
    for start in 0..n {
        if seen[start] || labels[start] >= 6 {
            continue;
        }
        // Flood fill over non-background pixels (any object color).
        let mut stack = vec![start];
        seen[start] = true;
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !seen[j] && labels[j] < 6 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if members.len() < min_pixels {
            continue;
        }
        let mut votes = [0usize; 6];
        let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
        let (mut sx, mut sy) = (0.0, 0.0);
        for &i in &members {
            votes[labels[i]] += 1;
            let (y, x) = (i / w, i % w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            sx += x as f64;
            sy += y as f64;
        }
        let color = Color::ALL[(0..6).max_by_key(|&c| votes[c]).unwrap()];
        let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        let m = members.len() as f64;
        blobs.push(Blob {
            color,
            pixels: members.len(),
            fill: m / area,
            centroid: (sx / m, sy / m),
        });
    }
    blobs.sort_by(|a, b| b.pixels.cmp(&a.pixels));
    Ok(Analysis {
        background: Background::ALL[bg],
        color_fractions,
        blobs,
    })
}
