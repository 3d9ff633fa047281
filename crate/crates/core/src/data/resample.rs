//! Deterministic separable resampling.
//!
//! Downscaling uses an exact area (box) filter, upscaling uses bilinear
//! interpolation with pixel-centre alignment and edge clamping. 8-bit
//! results round half away from zero and clamp to `[0, 255]`.

use image::RgbImage;

use crate::autograd::apply_separable;
use crate::tensor::Tensor;

/// `[out_len, in_len]` operator mapping a line of samples to a new length.
pub fn resample_matrix(in_len: usize, out_len: usize) -> Tensor {
    assert!(in_len >= 1 && out_len >= 1, "resample lengths must be positive");
    let mut m = Tensor::zeros(&[out_len, in_len]);
    if in_len == out_len {
        for i in 0..in_len {
            m.data_mut()[i * in_len + i] = 1.0;
        }
    } else if out_len < in_len {
        let s = in_len as f64 / out_len as f64;
        for j in 0..out_len {
            let (a, b) = (j as f64 * s, (j + 1) as f64 * s);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(in_len);
            for i in first..last {
                let overlap = (b.min((i + 1) as f64) - a.max(i as f64)).max(0.0);
                m.data_mut()[j * in_len + i] = overlap / s;
            }
        }
    } else {
        let scale = in_len as f64 / out_len as f64;
        for j in 0..out_len {
            let src = (j as f64 + 0.5) * scale - 0.5;
            write_bilinear_tap(&mut m, j, in_len, src);
        }
    }
    m
}

/// `[out_len, in_len]` operator that bilinearly samples the normalized
/// interval `[lo, hi]` of a line at `out_len` evenly spaced pixel centres.
pub fn window_matrix(in_len: usize, lo: f64, hi: f64, out_len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[out_len, in_len]);
    for j in 0..out_len {
        let u = lo + (j as f64 + 0.5) / out_len as f64 * (hi - lo);
        write_bilinear_tap(&mut m, j, in_len, u * in_len as f64 - 0.5);
    }
    m
}

fn write_bilinear_tap(m: &mut Tensor, row: usize, in_len: usize, src: f64) {
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let frac = src - i0 as f64;
    let i1 = (i0 + 1).min(in_len - 1);
    m.data_mut()[row * in_len + i0] += 1.0 - frac;
    if frac > 0.0 {
        m.data_mut()[row * in_len + i1] += frac;
    }
}

/// Resamples a `[c, h, w]` float image.
pub fn resample_float(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    if h == out_h && w == out_w {
        return img.clone();
    }
    let rows = resample_matrix(h, out_h);
    let cols = resample_matrix(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for (src, dst) in img.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        apply_separable(src, h, w, &rows, &cols, dst);
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Resamples an 8-bit RGB image; identical target size returns an exact copy.
pub fn resample_image(img: &RgbImage, out_h: u32, out_w: u32) -> RgbImage {
    assert!(out_h >= 1 && out_w >= 1, "output size must be positive");
    if img.height() == out_h && img.width() == out_w {
        return img.clone();
    }
    let planes = rgb_to_planes(img);
    let out = resample_float(&planes, out_h as usize, out_w as usize);
    planes_to_rgb(&out)
}

/// `[3, h, w]` tensor of raw 0..=255 channel values.
pub fn rgb_to_planes(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn planes_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.dim(1), t.dim(2));
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            p[c] = quantize(t.data()[(c * h + y as usize) * w + x as usize]);
        }
    }
    img
}

/// 8-bit image to the model's `[-1, 1]` domain, `[3, h, w]`.
pub fn to_model_domain(img: &RgbImage) -> Tensor {
    rgb_to_planes(img).map(|v| v / 127.5 - 1.0)
}

/// Model output in `[-1, 1]` back to 8-bit.
pub fn from_model_domain(t: &Tensor) -> RgbImage {
    planes_to_rgb(&t.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 127.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn identity_is_bit_exact() {
        let img = RgbImage::from_fn(256, 256, |x, y| Rgb([(x % 256) as u8, (y % 7) as u8, 3]));
        assert_eq!(resample_image(&img, 256, 256), img);
    }

    #[test]
    fn box_mean_rounds_half_up() {
        let mut img = RgbImage::new(2, 2);
        for x in 0..2 {
            img.put_pixel(x, 1, Rgb([255, 255, 255]));
        }
        let out = resample_image(&img, 1, 1);
        // 127.5 rounds away from zero.
        assert_eq!(out.get_pixel(0, 0), &Rgb([128, 128, 128]));
        let f = resample_float(&rgb_to_planes(&img), 1, 1);
        assert_eq!(f.data()[0], 127.5);
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = RgbImage::from_pixel(512, 512, Rgb([17, 200, 99]));
        let out = resample_image(&img, 256, 256);
        assert!(out.pixels().all(|p| *p == Rgb([17, 200, 99])));
        let up = resample_image(&RgbImage::from_pixel(5, 3, Rgb([1, 2, 3])), 11, 7);
        assert!(up.pixels().all(|p| *p == Rgb([1, 2, 3])));
    }

    #[test]
    fn window_over_own_grid_is_identity() {
        let m = window_matrix(16, 0.0, 1.0, 16);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(m.data()[i * 16 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    proptest! {
        #[test]
        fn operator_rows_sum_to_one(inp in 1usize..40, out in 1usize..40) {
            let m = resample_matrix(inp, out);
            for r in 0..out {
                let s: f64 = m.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(m.row(r).iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn resampling_is_idempotent_at_same_size(w in 1u32..20, h in 1u32..20, seed in 0u8..255) {
            let img = RgbImage::from_fn(w, h, |x, y| Rgb([seed ^ x as u8, y as u8, seed]));
            let once = resample_image(&img, h, w);
            prop_assert_eq!(&once, &img);
            prop_assert_eq!(resample_image(&once, h, w), once);
        }
    }
}
