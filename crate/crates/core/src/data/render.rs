use crate::data::scene::{Object, Scene, Shape};
use crate::data::HR_SIZE;
use crate::numerics::{Scalar, Tensor};

fn covers(o: &Object, x: i32, y: i32) -> bool {
    // Doubled coordinates keep every test in integers: pixel (x, y) has its
    // center at (2x + 1, 2y + 1).
    let (cx, cy) = o.position.center();
    let r2 = 2 * o.size.radius();
    let dx = 2 * x + 1 - 2 * cx;
    let dy = 2 * y + 1 - 2 * cy;
    match o.shape {
        Shape::Circle => dx * dx + dy * dy <= r2 * r2,
        Shape::Square => {
            let h = r2 - 2;
            dx.abs() <= h && dy.abs() <= h
        }
        Shape::Triangle => dy >= -r2 && dy <= r2 && 2 * dx.abs() <= dy + r2,
    }
}

/// 8-bit RGB raster of the scene at high resolution, row-major [y][x][c].
pub(crate) fn rasterize(scene: &Scene) -> Vec<[u8; 3]> {
    let bg = scene.background.rgb();
    let mut px = vec![bg; HR_SIZE * HR_SIZE];
    for o in &scene.objects {
        let rgb = o.color.rgb();
        for y in 0..HR_SIZE as i32 {
            for x in 0..HR_SIZE as i32 {
                if covers(o, x, y) {
                    px[y as usize * HR_SIZE + x as usize] = rgb;
                }
            }
        }
    }
    px
}

/// High-resolution image [3, 32, 32] with values in [-1, 1].
pub fn render_hr<T: Scalar>(scene: &Scene) -> Tensor<T> {
    let px = rasterize(scene);
    let n = HR_SIZE * HR_SIZE;
    let mut data = vec![T::zero(); 3 * n];
    for (i, rgb) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = T::lit(rgb[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::new(&[3, HR_SIZE, HR_SIZE], data).expect("static shape")
}

/// Base image [3, 16, 16], the 2× box-downsample of [`render_hr`].
pub fn render_lr<T: Scalar>(scene: &Scene) -> Tensor<T> {
    box_downsample(&render_hr(scene))
}

/// Averages non-overlapping 2×2 blocks of a [C, H, W] or [N, C, H, W] image.
pub fn box_downsample<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = img.numel() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1];
                let b = src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
                out.push((a + b) * quarter);
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(&shape, out).expect("downsample shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{Background, Color, Position, Size};
    use crate::data::IMAGE_SIZE;

    #[test]
    fn lr_matches_size_and_range() {
        let s = Scene {
            objects: vec![Object {
                shape: Shape::Triangle,
                color: Color::Yellow,
                size: Size::Large,
                position: Position::Center,
            }],
            background: Background::Black,
        };
        let lr = render_lr::<f32>(&s);
        assert_eq!(lr.shape(), &[3, IMAGE_SIZE, IMAGE_SIZE]);
        assert!(lr.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(render_hr::<f32>(&s), render_hr::<f32>(&s));
        let n_obj = rasterize(&s).iter().filter(|p| **p != [0, 0, 0]).count();
        assert!(n_obj > 50 && n_obj < 225, "{n_obj}");
    }
}
