//! Procedural image datasets for desk-scale experiments.
//!
//! Scenes are drawn in normalized coordinates, so the same scene can be
//! rendered at any resolution. An optional stripe texture with a period of a
//! few native pixels is only resolvable at high resolution: box-downsampling
//! by a multiple of the period averages it away.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{resample_image, ManifestOptions, Source, SourceDir};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    /// Inside test in units of the shape radius, centred at the origin.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= 1.0,
            Shape::Square => dx.abs() <= 0.85 && dy.abs() <= 0.85,
            Shape::Triangle => {
                let t = (dy + 1.0) / 2.0;
                (0.0..=1.0).contains(&t) && dx.abs() <= t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClass {
    pub name: String,
    pub shape: Shape,
    /// Base fill colour in `[0, 1]`.
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    /// Stripe period in native pixels; `None` disables the texture.
    pub stripe_period: Option<f64>,
    pub stripe_contrast: f64,
    pub color_jitter: f64,
    /// Shape radius range as a fraction of the shorter side.
    pub radius: (f64, f64),
    /// Spread of the shape centre around the image centre.
    pub center_jitter: f64,
    /// Number of random background rectangles.
    pub clutter: usize,
    /// Per-pixel Gaussian noise, in `[0, 1]` units.
    pub noise: f64,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            stripe_period: None,
            stripe_contrast: 0.5,
            color_jitter: 0.05,
            radius: (0.25, 0.33),
            center_jitter: 0.1,
            clutter: 0,
            noise: 0.0,
        }
    }
}

struct Scene {
    background: [f64; 3],
    fill: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
    stripe_phase: f64,
    clutter: Vec<([f64; 4], [f64; 3])>,
}

fn draw_scene<R: Rng + ?Sized>(class: &ToyClass, style: &SceneStyle, rng: &mut R) -> Scene {
    let jitter = |rng: &mut R, s: f64| rng.random_range(-s..=s);
    let grey = rng.random_range(0.15..0.3);
    let background = [0, 1, 2].map(|_| (grey + jitter(rng, 0.03)).clamp(0.0, 1.0));
    let shift = jitter(rng, style.color_jitter);
    let fill = class
        .color
        .map(|c| (c + shift + jitter(rng, style.color_jitter)).clamp(0.0, 1.0));
    let cx = 0.5 + jitter(rng, style.center_jitter);
    let cy = 0.5 + jitter(rng, style.center_jitter);
    let radius = rng.random_range(style.radius.0..=style.radius.1);
    let stripe_phase = rng.random_range(0.0..1.0);
    let clutter = (0..style.clutter)
        .map(|_| {
            let x0 = rng.random_range(0.0..0.85);
            let y0 = rng.random_range(0.0..0.85);
            let w = rng.random_range(0.05..0.2);
            let h = rng.random_range(0.05..0.2);
            let col = [0, 1, 2].map(|_| rng.random_range(0.1..0.9));
            ([x0, y0, x0 + w, y0 + h], col)
        })
        .collect();
    Scene {
        background,
        fill,
        cx,
        cy,
        radius,
        stripe_phase,
        clutter,
    }
}

/// Renders one scene of `class` at `width x height`.
pub fn render_scene<R: Rng + ?Sized>(
    class: &ToyClass,
    style: &SceneStyle,
    width: u32,
    height: u32,
    rng: &mut R,
) -> RgbImage {
    let scene = draw_scene(class, style, rng);
    let (w, h) = (width as f64, height as f64);
    let side = w.min(h);
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite noise level");
    const SUB: [f64; 2] = [0.25, 0.75];
    RgbImage::from_fn(width, height, |px, py| {
        let mut acc = [0.0; 3];
        for sy in SUB {
            for sx in SUB {
                let (x, y) = (px as f64 + sx, py as f64 + sy);
                let (u, v) = (x / w, y / h);
                let mut col = scene.background;
                for (rect, c) in &scene.clutter {
                    if u >= rect[0] && u <= rect[2] && v >= rect[1] && v <= rect[3] {
                        col = *c;
                    }
                }
                let dx = (x - scene.cx * w) / (scene.radius * side);
                let dy = (y - scene.cy * h) / (scene.radius * side);
                if class.shape.contains(dx, dy) {
                    col = scene.fill;
                    if let Some(period) = style.stripe_period {
                        let t = (std::f64::consts::TAU * (px as f64 + 0.5) / period
                            + std::f64::consts::TAU * scene.stripe_phase)
                            .sin();
                        let f = 1.0 + style.stripe_contrast * t;
                        col = col.map(|c| c * f);
                    }
                }
                for k in 0..3 {
                    acc[k] += col[k] / 4.0;
                }
            }
        }
        let out = acc.map(|c| {
            let v = if style.noise > 0.0 { c + noise.sample(rng) } else { c };
            crate::data::quantize(v.clamp(0.0, 1.0) * 255.0)
        });
        Rgb(out)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub classes: Vec<ToyClass>,
    pub style: SceneStyle,
    pub lr_per_class: usize,
    pub hr_per_class: usize,
    pub lr_size: u32,
    /// Candidate native sides for HR images; width and height are drawn
    /// independently.
    pub hr_sides: Vec<u32>,
    /// LR images are rendered at `lr_size * lr_supersample` and box-filtered.
    pub lr_supersample: u32,
}

impl ToyDatasetSpec {
    /// Red disks vs blue squares, LR only.
    pub fn two_shapes(per_class: usize, lr_size: u32) -> Self {
        Self {
            classes: vec![
                ToyClass {
                    name: "disk".into(),
                    shape: Shape::Disk,
                    color: [0.85, 0.3, 0.2],
                },
                ToyClass {
                    name: "square".into(),
                    shape: Shape::Square,
                    color: [0.2, 0.4, 0.85],
                },
            ],
            style: SceneStyle::default(),
            lr_per_class: per_class,
            hr_per_class: 0,
            lr_size,
            hr_sides: vec![],
            lr_supersample: 4,
        }
    }

    /// One class with a 4-pixel stripe texture on HR images of 4x and 8x
    /// the LR side; the texture vanishes under box-downsampling to LR.
    pub fn fine_texture(lr_count: usize, hr_count: usize, lr_size: u32) -> Self {
        Self {
            classes: vec![ToyClass {
                name: "burger".into(),
                shape: Shape::Disk,
                color: [0.8, 0.55, 0.25],
            }],
            style: SceneStyle {
                stripe_period: Some(4.0),
                stripe_contrast: 0.6,
                ..SceneStyle::default()
            },
            lr_per_class: lr_count,
            hr_per_class: hr_count,
            lr_size,
            hr_sides: vec![4 * lr_size, 8 * lr_size],
            lr_supersample: 4,
        }
    }

    /// Three cluttered, noisy classes with overlapping colours, LR and HR.
    pub fn three_foods(lr_per_class: usize, hr_per_class: usize, lr_size: u32) -> Self {
        Self {
            classes: vec![
                ToyClass {
                    name: "hamburger".into(),
                    shape: Shape::Disk,
                    color: [0.7, 0.5, 0.3],
                },
                ToyClass {
                    name: "pizza".into(),
                    shape: Shape::Triangle,
                    color: [0.75, 0.5, 0.3],
                },
                ToyClass {
                    name: "spring_rolls".into(),
                    shape: Shape::Square,
                    color: [0.7, 0.55, 0.3],
                },
            ],
            style: SceneStyle {
                color_jitter: 0.15,
                radius: (0.2, 0.35),
                center_jitter: 0.15,
                clutter: 3,
                noise: 0.12,
                ..SceneStyle::default()
            },
            lr_per_class,
            hr_per_class,
            lr_size,
            hr_sides: vec![2 * lr_size, 3 * lr_size],
            lr_supersample: 4,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Manifest options matching the on-disk layout written by [`write`].
    pub fn manifest_options(&self, seed: u64) -> ManifestOptions {
        let mut layout = vec![SourceDir {
            subdir: "lr".into(),
            source: Source::Lr,
        }];
        if self.hr_per_class > 0 {
            layout.push(SourceDir {
                subdir: "hr".into(),
                source: Source::Hr,
            });
        }
        ManifestOptions {
            lr_size: self.lr_size,
            hr_min_side: self.hr_sides.iter().copied().min().unwrap_or(self.lr_size),
            seed,
            layout,
        }
    }

    /// Writes `root/lr/<class>/*.png` and `root/hr/<class>/*.png`.
    pub fn write(&self, root: &Path, seed: u64) -> Result<()> {
        if self.classes.is_empty() || self.lr_size == 0 || self.lr_supersample == 0 {
            return Err(Error::Config("toy dataset needs classes and a positive lr_size".into()));
        }
        if self.hr_per_class > 0 && self.hr_sides.is_empty() {
            return Err(Error::Config("hr_sides is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in &self.classes {
            let lr_dir = root.join("lr").join(&class.name);
            fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;
            let big = self.lr_size * self.lr_supersample;
            for i in 0..self.lr_per_class {
                let img = render_scene(class, &self.style, big, big, &mut rng);
                let img = resample_image(&img, self.lr_size, self.lr_size);
                save(&img, &lr_dir.join(format!("{i:05}.png")))?;
            }
            if self.hr_per_class == 0 {
                continue;
            }
            let hr_dir = root.join("hr").join(&class.name);
            fs::create_dir_all(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
            for i in 0..self.hr_per_class {
                let w = self.hr_sides[rng.random_range(0..self.hr_sides.len())];
                let h = self.hr_sides[rng.random_range(0..self.hr_sides.len())];
                let img = render_scene(class, &self.style, w, h, &mut rng);
                save(&img, &hr_dir.join(format!("{i:05}.png")))?;
            }
        }
        Ok(())
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
