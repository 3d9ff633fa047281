//! Square patch descriptors and the any-resolution patch sampler.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::resample::{resample_float, resample_image};
use super::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A square crop in normalized source coordinates, tied to the native size
/// of the image it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub native_width: u32,
    pub native_height: u32,
    pub out_size: u32,
}

impl PatchSpec {
    pub fn full_frame(native_width: u32, native_height: u32, out_size: u32) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
            native_width,
            native_height,
            out_size,
        }
    }

    /// Spec for the pixel-space square `[left, left+side) x [top, top+side)`.
    pub fn from_pixels(
        native_width: u32,
        native_height: u32,
        left: u32,
        top: u32,
        side: u32,
        out_size: u32,
    ) -> Self {
        let (w, h) = (native_width as f64, native_height as f64);
        Self {
            x0: left as f64 / w,
            y0: top as f64 / h,
            x1: (left + side) as f64 / w,
            y1: (top + side) as f64 / h,
            native_width,
            native_height,
            out_size,
        }
    }

    pub fn is_full_frame(&self) -> bool {
        self.x0 == 0.0 && self.y0 == 0.0 && self.x1 == 1.0 && self.y1 == 1.0
    }

    /// Denormalized `(width, height)` of the crop in native pixels.
    pub fn pixel_extent(&self) -> (f64, f64) {
        (
            (self.x1 - self.x0) * self.native_width as f64,
            (self.y1 - self.y0) * self.native_height as f64,
        )
    }

    /// Integer pixel rectangle `(left, top, right, bottom)` of the crop.
    pub fn pixel_rect(&self) -> (u32, u32, u32, u32) {
        let (w, h) = (self.native_width as f64, self.native_height as f64);
        (
            (self.x0 * w).round() as u32,
            (self.y0 * h).round() as u32,
            (self.x1 * w).round() as u32,
            (self.y1 * h).round() as u32,
        )
    }

    /// Log2 magnification of this patch relative to a full-frame render of
    /// the shorter native side.
    pub fn zoom_log2(&self) -> f64 {
        let (pw, ph) = self.pixel_extent();
        let side = pw.min(ph);
        let min_native = self.native_width.min(self.native_height) as f64;
        (min_native / side).log2()
    }

    /// Log2 of the shorter native side relative to the output size.
    pub fn native_log2(&self) -> f64 {
        (self.native_width.min(self.native_height) as f64 / self.out_size as f64).log2()
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Precondition(format!("patch coordinates outside [0,1]: {self:?}")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Precondition(format!("empty patch window: {self:?}")));
        }
        if self.native_width == 0 || self.native_height == 0 || self.out_size == 0 {
            return Err(Error::Precondition("zero patch dimensions".into()));
        }
        let (pw, ph) = self.pixel_extent();
        if (pw - ph).abs() > 1.0 {
            return Err(Error::Precondition(format!(
                "patch is not square in pixels ({pw:.3} x {ph:.3})"
            )));
        }
        if pw.min(ph) + 1e-9 < self.out_size as f64 {
            return Err(Error::Precondition(format!(
                "patch side {:.3} below output size {}",
                pw.min(ph),
                self.out_size
            )));
        }
        Ok(())
    }

    fn check_against(&self, width: u32, height: u32) -> Result<()> {
        self.validate()?;
        if self.native_width != width || self.native_height != height {
            return Err(Error::Precondition(format!(
                "patch native size {}x{} does not match image {}x{}",
                self.native_width, self.native_height, width, height
            )));
        }
        Ok(())
    }

    /// Stable textual form used for spec-list digests.
    pub fn canonical(&self) -> String {
        format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{},{},{}",
            self.x0, self.y0, self.x1, self.y1, self.native_width, self.native_height, self.out_size
        )
    }
}

/// Draws a square patch with log-uniform side length in
/// `[min_side, min(width, height)]` and a uniform top-left corner.
pub fn sample_patch<R: Rng + ?Sized>(
    record: &ImageRecord,
    rng: &mut R,
    min_side: u32,
    out_size: u32,
) -> Result<PatchSpec> {
    let max_side = record.width.min(record.height);
    if max_side < min_side {
        return Err(Error::Precondition(format!(
            "image {} ({}x{}) is smaller than the minimum patch side {min_side}",
            record.id, record.width, record.height
        )));
    }
    let side = if max_side == min_side {
        min_side
    } else {
        let (lo, hi) = ((min_side as f64).ln(), (max_side as f64).ln());
        let draw: f64 = rng.random_range(lo..=hi);
        (draw.exp().round() as u32).clamp(min_side, max_side)
    };
    let left = rng.random_range(0..=record.width - side);
    let top = rng.random_range(0..=record.height - side);
    Ok(PatchSpec::from_pixels(
        record.width,
        record.height,
        left,
        top,
        side,
        out_size,
    ))
}

/// Crops the spec's window at native resolution, then downsamples it to
/// `out_size x out_size`.
pub fn extract_patch(image: &RgbImage, spec: &PatchSpec) -> Result<RgbImage> {
    spec.check_against(image.width(), image.height())?;
    let (l, t, r, b) = spec.pixel_rect();
    let crop = image::imageops::crop_imm(image, l, t, r - l, b - t).to_image();
    Ok(resample_image(&crop, spec.out_size, spec.out_size))
}

/// Float counterpart of [`extract_patch`] on a `[c, h, w]` tensor.
pub fn extract_patch_float(image: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    spec.check_against(w as u32, h as u32)?;
    let (l, t, r, b) = spec.pixel_rect();
    let (l, t, r, b) = (l as usize, t as usize, r as usize, b as usize);
    assert!(r - l >= spec.out_size as usize && b - t >= spec.out_size as usize);
    let mut crop = Vec::with_capacity(c * (b - t) * (r - l));
    for ch in 0..c {
        for y in t..b {
            let row = &image.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            crop.extend_from_slice(&row[l..r]);
        }
    }
    let crop = Tensor::from_vec(&[c, b - t, r - l], crop);
    let out = spec.out_size as usize;
    Ok(resample_float(&crop, out, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Source;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(w: u32, h: u32) -> ImageRecord {
        ImageRecord {
            id: "r".into(),
            path: "r.png".into(),
            class_id: 0,
            width: w,
            height: h,
            source: Source::Hr,
        }
    }

    #[test]
    fn forced_patch_arithmetic() {
        let spec = PatchSpec::from_pixels(1024, 768, 128, 64, 384, 256);
        assert_eq!(spec.x0, 0.125);
        assert!((spec.y0 - 0.083_333_333).abs() < 1e-8);
        assert_eq!(spec.x1, 0.5);
        assert!((spec.y1 - 0.583_333_333).abs() < 1e-8);
        spec.validate().unwrap();
    }

    #[test]
    fn minimum_size_image_yields_full_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let spec = sample_patch(&record(256, 256), &mut rng, 256, 256).unwrap();
            assert!(spec.is_full_frame());
        }
    }

    #[test]
    fn undersized_image_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_patch(&record(200, 300), &mut rng, 256, 256).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn sampled_sides_span_range_and_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rec = record(1000, 1000);
        let (mut lo, mut hi) = (u32::MAX, 0);
        for _ in 0..10_000 {
            let spec = sample_patch(&rec, &mut rng, 256, 256).unwrap();
            spec.validate().unwrap();
            let (pw, ph) = spec.pixel_extent();
            assert!((pw - ph).abs() < 1e-6);
            let side = pw.round() as u32;
            assert!((256..=1000).contains(&side));
            lo = lo.min(side);
            hi = hi.max(side);
        }
        assert!(lo <= 260 && hi >= 990, "sides spanned only [{lo}, {hi}]");
    }

    #[test]
    fn sampling_is_deterministic_per_rng_state() {
        let rec = record(900, 700);
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| sample_patch(&rec, &mut rng, 256, 256).unwrap()).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b: Vec<_> = (0..50).map(|_| sample_patch(&rec, &mut rng, 256, 256).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn full_frame_extraction() {
        let img = RgbImage::from_fn(256, 256, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        let spec = PatchSpec::full_frame(256, 256, 256);
        assert_eq!(extract_patch(&img, &spec).unwrap(), img);

        let big = RgbImage::from_fn(512, 512, |x, y| Rgb([(x / 3) as u8, (y / 5) as u8, 7]));
        let spec = PatchSpec::full_frame(512, 512, 256);
        assert_eq!(extract_patch(&big, &spec).unwrap(), resample_image(&big, 256, 256));
    }

    #[test]
    fn native_size_mismatch_is_an_error() {
        let img = RgbImage::new(300, 300);
        let spec = PatchSpec::full_frame(512, 512, 256);
        assert!(extract_patch(&img, &spec).is_err());
    }

    #[test]
    fn crop_first_keeps_detail_lost_by_downsampling_first() {
        // Fine checkerboard: visible in native crops, averaged away at 256.
        let img = RgbImage::from_fn(1024, 1024, |x, y| {
            let v = if ((x / 2) + (y / 2)) % 2 == 0 { 230 } else { 20 };
            Rgb([v, v, v])
        });
        let small = resample_image(&img, 256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rec = record(1024, 1024);
        let mut total = 0.0;
        for _ in 0..64 {
            let spec = sample_patch(&rec, &mut rng, 256, 256).unwrap();
            let direct = extract_patch(&img, &spec).unwrap();
            let via_small = resample_image(
                &image::imageops::crop_imm(
                    &small,
                    (spec.x0 * 256.0) as u32,
                    (spec.y0 * 256.0) as u32,
                    (((spec.x1 - spec.x0) * 256.0) as u32).max(1),
                    (((spec.y1 - spec.y0) * 256.0) as u32).max(1),
                )
                .to_image(),
                256,
                256,
            );
            let mad: f64 = direct
                .as_raw()
                .iter()
                .zip(via_small.as_raw())
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .sum::<f64>()
                / direct.as_raw().len() as f64;
            total += mad;
        }
        assert!(total > 0.0);
    }

    #[test]
    fn float_and_byte_extraction_agree() {
        let img = RgbImage::from_fn(64, 48, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, 100]));
        let spec = PatchSpec::from_pixels(64, 48, 10, 4, 40, 16);
        let a = extract_patch(&img, &spec).unwrap();
        let f = extract_patch_float(&super::super::resample::rgb_to_planes(&img), &spec).unwrap();
        assert_eq!(super::super::resample::planes_to_rgb(&f), a);
    }
}
