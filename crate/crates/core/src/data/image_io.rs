use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Interleaved 8-bit RGB from a [3, H, W] image in [-1, 1].
pub fn image_to_rgb8<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("image_to_rgb8", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            let v = img.data()[c * n + i].to_f64_lossy();
            out.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((h, w, out))
}

fn write_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w, rgb) = image_to_rgb8(img)?;
    write_png(path, w, h, &rgb)
}

/// Binary PPM (P6).
pub fn save_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w, rgb) = image_to_rgb8(img)?;
    let mut f = BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write!(f, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&rgb).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Tiles equally sized images into rows of `cols`, separated by a 1-pixel gutter.
pub fn save_grid_png<T: Scalar>(path: &Path, images: &[Tensor<T>], cols: usize) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::invalid("save_grid_png", "no images"))?;
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut canvas = vec![255u8; 3 * gw * gh];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape("save_grid_png", first.shape(), img.shape()));
        }
        let (_, _, rgb) = image_to_rgb8(img)?;
        let (ox, oy) = ((k % cols) * (w + 1), (k / cols) * (h + 1));
        for y in 0..h {
            let dst = 3 * ((oy + y) * gw + ox);
            canvas[dst..dst + 3 * w].copy_from_slice(&rgb[3 * y * w..3 * (y + 1) * w]);
        }
    }
    write_png(path, gw, gh, &canvas)
}
