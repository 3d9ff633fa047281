//! Toy-scale conditional generator and projection discriminator.
//!
//! The generator maps `(z, one-hot c)` through an MLP to a style vector `w`,
//! evaluates fixed Fourier features on the patch's coordinate grid and runs
//! `K` style-modulated convolution blocks followed by a modulated 1x1 RGB
//! layer and `tanh`. The patch's scale embedding is appended to `w` before
//! every affine style map, so the same weights render full frames and
//! zoomed-in patches.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::PatchSpec;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{one_hot, Tensor};

const LRELU_SLOPE: f64 = 0.2;
const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// Length of the per-patch scale embedding: `[zoom_log2, native_log2]`.
pub const SCALE_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self(Tensor::randn(&[dim], 1.0, rng).into_data())
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub index: usize,
    pub num_classes: usize,
}

impl ClassLabel {
    pub fn new(index: usize, num_classes: usize) -> Result<Self> {
        if index >= num_classes {
            return Err(Error::Precondition(format!(
                "class {index} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { index, num_classes })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.index] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisInput {
    pub w: StyleVector,
    pub patch: PatchSpec,
}

/// `[zoom_log2, native_log2]` for a patch.
pub fn scale_embedding(spec: &PatchSpec) -> [f64; SCALE_DIM] {
    [spec.zoom_log2(), spec.native_log2()]
}

pub fn scale_batch(specs: &[PatchSpec]) -> Tensor {
    let data = specs.iter().flat_map(scale_embedding).collect();
    Tensor::from_vec(&[specs.len(), SCALE_DIM], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mult: f64,
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub fourier_features: usize,
    /// Highest Fourier frequency, in cycles per unit of normalized image.
    pub fourier_max_freq: f64,
    pub out_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 64,
            num_classes: 1,
            embed_dim: 64,
            mapping_layers: 2,
            mapping_lr_mult: 0.01,
            channels: 32,
            blocks: 6,
            kernel: 3,
            fourier_features: 32,
            fourier_max_freq: 64.0,
            out_size: 32,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("z_dim", self.z_dim),
            ("w_dim", self.w_dim),
            ("num_classes", self.num_classes),
            ("mapping_layers", self.mapping_layers),
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("fourier_features", self.fourier_features),
            ("out_size", self.out_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("generator {name} must be positive")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("generator kernel must be odd".into()));
        }
        if !(self.mapping_lr_mult > 0.0) || !(self.fourier_max_freq > 0.0) {
            return Err(Error::Config("generator rates must be positive".into()));
        }
        Ok(())
    }
}

/// Amplitude for a feature at `cycles_per_pixel` on the sampling grid:
/// 1 up to a quarter cycle per pixel, fading linearly to 0 at Nyquist.
fn band_limit(cycles_per_pixel: f64) -> f64 {
    ((0.5 - cycles_per_pixel) / 0.25).clamp(0.0, 1.0)
}

/// Fixed random Fourier basis: `sin(2π (fx·x + fy·y) + phase)`, band-limited
/// to the grid it is sampled on.
#[derive(Clone, Debug, PartialEq)]
struct FourierBasis {
    freqs: Vec<(f64, f64)>,
    phases: Vec<f64>,
}

impl FourierBasis {
    fn new(count: usize, max_freq: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut freqs = Vec::with_capacity(count);
        let mut phases = Vec::with_capacity(count);
        for i in 0..count {
            // Magnitudes log-spaced from 0.5 to max_freq, directions random.
            let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
            let mag = 0.5 * (max_freq / 0.5).powf(t);
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            freqs.push((mag * angle.cos(), mag * angle.sin()));
            phases.push(rng.random_range(0.0..2.0 * PI));
        }
        Self { freqs, phases }
    }

    /// `[n, F, S, S]` features sampled at pixel centres of each window.
    fn grid(&self, specs: &[PatchSpec], size: usize) -> Tensor {
        let f = self.freqs.len();
        let mut data = vec![0.0; specs.len() * f * size * size];
        let mut xs = vec![0.0; size];
        let mut ys = vec![0.0; size];
        for (n, spec) in specs.iter().enumerate() {
            let (dx, dy) = ((spec.x1 - spec.x0) / size as f64, (spec.y1 - spec.y0) / size as f64);
            for i in 0..size {
                xs[i] = spec.x0 + (i as f64 + 0.5) * dx;
                ys[i] = spec.y0 + (i as f64 + 0.5) * dy;
            }
            let spacing = dx.max(dy);
            for (j, (&(fx, fy), &ph)) in self.freqs.iter().zip(&self.phases).enumerate() {
                let gain = band_limit(fx.hypot(fy) * spacing);
                if gain == 0.0 {
                    continue;
                }
                let base = (n * f + j) * size * size;
                for (yi, y) in ys.iter().enumerate() {
                    for (xi, x) in xs.iter().enumerate() {
                        data[base + yi * size + xi] = gain * (2.0 * PI * (fx * x + fy * y) + ph).sin();
                    }
                }
            }
        }
        Tensor::from_vec(&[specs.len(), f, size, size], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SynthBlock {
    affine_w: usize,
    affine_b: usize,
    conv_w: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    fourier: FourierBasis,
    embed: usize,
    mapping: Vec<(usize, usize)>,
    blocks: Vec<SynthBlock>,
    to_rgb: SynthBlock,
}

fn fan_in_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fourier = FourierBasis::new(config.fourier_features, config.fourier_max_freq, &mut rng);
        let mut params = ParamSet::default();
        let lm = config.mapping_lr_mult;

        let embed = params.push(
            "mapping.embed",
            Tensor::randn(&[config.embed_dim, config.num_classes], 1.0, &mut rng),
            lm,
        );
        let mut mapping = Vec::new();
        let mut din = config.z_dim + config.embed_dim;
        for i in 0..config.mapping_layers {
            let w = params.push(
                format!("mapping.fc{i}.weight"),
                fan_in_normal(&[config.w_dim, din], din, &mut rng),
                lm,
            );
            let b = params.push(format!("mapping.fc{i}.bias"), Tensor::zeros(&[config.w_dim]), lm);
            mapping.push((w, b));
            din = config.w_dim;
        }

        let style_in = config.w_dim + SCALE_DIM;
        let mut blocks = Vec::new();
        let mut cin = config.fourier_features;
        for i in 0..config.blocks {
            let k = config.kernel;
            let affine_w = params.push(
                format!("synthesis.b{i}.affine.weight"),
                fan_in_normal(&[cin, style_in], style_in, &mut rng),
                1.0,
            );
            let affine_b = params.push(format!("synthesis.b{i}.affine.bias"), Tensor::full(&[cin], 1.0), 1.0);
            let conv_w = params.push(
                format!("synthesis.b{i}.conv.weight"),
                Tensor::randn(&[config.channels, cin, k, k], 1.0, &mut rng),
                1.0,
            );
            let bias = params.push(format!("synthesis.b{i}.conv.bias"), Tensor::zeros(&[config.channels]), 1.0);
            blocks.push(SynthBlock {
                affine_w,
                affine_b,
                conv_w,
                bias,
            });
            cin = config.channels;
        }
        let to_rgb = SynthBlock {
            affine_w: params.push(
                "synthesis.rgb.affine.weight",
                fan_in_normal(&[cin, style_in], style_in, &mut rng),
                1.0,
            ),
            affine_b: params.push("synthesis.rgb.affine.bias", Tensor::full(&[cin], 1.0), 1.0),
            conv_w: params.push(
                "synthesis.rgb.conv.weight",
                fan_in_normal(&[3, cin, 1, 1], cin, &mut rng),
                1.0,
            ),
            bias: params.push("synthesis.rgb.conv.bias", Tensor::zeros(&[3]), 1.0),
        };
        Ok(Self {
            config,
            params,
            fourier,
            embed,
            mapping,
            blocks,
            to_rgb,
        })
    }

    /// Rebuilds a generator around previously trained parameters.
    pub fn with_params(config: GeneratorConfig, params: ParamSet) -> Result<Self> {
        let mut g = Self::new(config)?;
        if g.params.shape_table() != params.shape_table() {
            return Err(Error::Shape("generator parameter table does not match config".into()));
        }
        g.params = params;
        Ok(g)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Mapping network on a batch: `z: [n, z_dim]`, `onehot: [n, C]` → `[n, w_dim]`.
    pub fn map_forward(&self, g: &mut Graph, p: &[Var], z: Var, onehot: Var) -> Var {
        let e = g.linear(onehot, p[self.embed], None);
        let mut h = g.concat_cols(z, e);
        let last = self.mapping.len() - 1;
        for (i, &(w, b)) in self.mapping.iter().enumerate() {
            h = g.linear(h, p[w], Some(p[b]));
            if i != last {
                h = g.leaky_relu(h, LRELU_SLOPE);
                h = g.scale(h, LRELU_GAIN);
            }
        }
        h
    }

    /// Synthesis network for a batch of styles rendered over `specs`.
    pub fn synth_forward(&self, g: &mut Graph, p: &[Var], w: Var, specs: &[PatchSpec]) -> Var {
        let size = specs[0].out_size as usize;
        let scale = g.constant(scale_batch(specs));
        let style_in = g.concat_cols(w, scale);
        let mut x = g.constant(self.fourier.grid(specs, size));
        for b in &self.blocks {
            let s = g.linear(style_in, p[b.affine_w], Some(p[b.affine_b]));
            x = g.mod_conv(x, p[b.conv_w], Some(s), true);
            x = g.channel_bias(x, p[b.bias]);
            x = g.leaky_relu(x, LRELU_SLOPE);
            x = g.scale(x, LRELU_GAIN);
        }
        let s = g.linear(style_in, p[self.to_rgb.affine_w], Some(p[self.to_rgb.affine_b]));
        x = g.mod_conv(x, p[self.to_rgb.conv_w], Some(s), false);
        x = g.channel_bias(x, p[self.to_rgb.bias]);
        g.tanh(x)
    }

    /// Full differentiable pass `(z, c, spec) -> image batch`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        z: &Tensor,
        labels: &[usize],
        specs: &[PatchSpec],
    ) -> Var {
        let zv = g.constant(z.clone());
        let c = g.constant(one_hot(labels, self.config.num_classes));
        let w = self.map_forward(g, p, zv, c);
        self.synth_forward(g, p, w, specs)
    }

    fn check_batch(&self, z: &Tensor, labels: &[usize], specs: &[PatchSpec]) -> Result<()> {
        if z.shape().len() != 2 || z.dim(1) != self.config.z_dim {
            return Err(Error::Shape(format!(
                "latent batch {:?} does not match z_dim {}",
                z.shape(),
                self.config.z_dim
            )));
        }
        if labels.len() != z.dim(0) || specs.len() != z.dim(0) {
            return Err(Error::Shape("latent, label and spec counts differ".into()));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= self.config.num_classes) {
            return Err(Error::Precondition(format!("label {c} out of range")));
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("latent code".into()));
        }
        for s in specs {
            s.validate()?;
            if s.out_size != specs[0].out_size {
                return Err(Error::Shape("mixed output sizes in one batch".into()));
            }
        }
        Ok(())
    }

    /// Inference render of a batch: `[n, 3, S, S]` in `[-1, 1]`.
    pub fn render(&self, z: &Tensor, labels: &[usize], specs: &[PatchSpec]) -> Result<Tensor> {
        if specs.is_empty() {
            return Ok(Tensor::zeros(&[0, 3, self.config.out_size, self.config.out_size]));
        }
        self.check_batch(z, labels, specs)?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite("generator parameters".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, z, labels, specs);
        Ok(g.value(out).clone())
    }

    pub fn map_latent(&self, z: &LatentCode, c: &ClassLabel) -> Result<StyleVector> {
        if z.0.len() != self.config.z_dim || c.num_classes != self.config.num_classes {
            return Err(Error::Shape(format!(
                "mapping expects z_dim {} and {} classes, got {} and {}",
                self.config.z_dim,
                self.config.num_classes,
                z.0.len(),
                c.num_classes
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(Tensor::from_vec(&[1, z.0.len()], z.0.clone()));
        let cv = g.constant(Tensor::from_vec(&[1, c.num_classes], c.one_hot()));
        let w = self.map_forward(&mut g, &p, zv, cv);
        Ok(StyleVector(g.value(w).data().to_vec()))
    }

    /// Renders one `[3, S, S]` image for a style vector and patch window.
    pub fn synthesize(&self, input: &SynthesisInput) -> Result<Tensor> {
        input.patch.validate()?;
        if input.w.0.len() != self.config.w_dim {
            return Err(Error::Shape("style vector dimension".into()));
        }
        if !input.w.0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("style vector".into()));
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("generator parameters".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let w = g.constant(Tensor::from_vec(&[1, self.config.w_dim], input.w.0.clone()));
        let out = self.synth_forward(&mut g, &p, w, std::slice::from_ref(&input.patch));
        let s = input.patch.out_size as usize;
        Ok(g.value(out).clone().reshape(&[3, s, s]))
    }

    /// Full-frame spec at the generator's native output size.
    pub fn global_spec(&self) -> PatchSpec {
        let s = self.config.out_size as u32;
        PatchSpec::full_frame(s, s, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub in_size: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            channels: 32,
            feature_dim: 64,
            in_size: 32,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
    from_rgb: (usize, usize),
    convs: Vec<(usize, usize)>,
    fc: (usize, usize),
    out: (usize, usize),
    class_embed: usize,
    scale_embed: usize,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.in_size < 4 || !config.in_size.is_power_of_two() {
            return Err(Error::Config("discriminator input size must be a power of two >= 4".into()));
        }
        if config.channels == 0 || config.feature_dim == 0 || config.num_classes == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::default();
        let ch = config.channels;
        let from_rgb = (
            params.push("d.from_rgb.weight", fan_in_normal(&[ch, 3, 1, 1], 3, &mut rng), 1.0),
            params.push("d.from_rgb.bias", Tensor::zeros(&[ch]), 1.0),
        );
        let mut convs = Vec::new();
        let mut size = config.in_size;
        let mut i = 0;
        while size > 4 {
            convs.push((
                params.push(
                    format!("d.conv{i}.weight"),
                    fan_in_normal(&[ch, ch, 3, 3], ch * 9, &mut rng),
                    1.0,
                ),
                params.push(format!("d.conv{i}.bias"), Tensor::zeros(&[ch]), 1.0),
            ));
            size /= 2;
            i += 1;
        }
        let flat = ch * 16;
        let f = config.feature_dim;
        let fc = (
            params.push("d.fc.weight", fan_in_normal(&[f, flat], flat, &mut rng), 1.0),
            params.push("d.fc.bias", Tensor::zeros(&[f]), 1.0),
        );
        let out = (
            params.push("d.out.weight", fan_in_normal(&[1, f], f, &mut rng), 1.0),
            params.push("d.out.bias", Tensor::zeros(&[1]), 1.0),
        );
        let class_embed = params.push(
            "d.class_embed",
            fan_in_normal(&[f, config.num_classes], f, &mut rng),
            1.0,
        );
        let scale_embed = params.push(
            "d.scale_embed",
            fan_in_normal(&[f, SCALE_DIM], f, &mut rng),
            1.0,
        );
        Ok(Self {
            config,
            params,
            from_rgb,
            convs,
            fc,
            out,
            class_embed,
            scale_embed,
        })
    }

    pub fn with_params(config: DiscriminatorConfig, params: ParamSet) -> Result<Self> {
        let mut d = Self::new(config)?;
        if d.params.shape_table() != params.shape_table() {
            return Err(Error::Shape("discriminator parameter table does not match config".into()));
        }
        d.params = params;
        Ok(d)
    }

    /// `logit = f(x) + <E c, φ(x)> + <A s, φ(x)>`, shape `[n, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, onehot: Var, scale: Var) -> Var {
        let mut h = g.conv(x, p[self.from_rgb.0]);
        h = g.channel_bias(h, p[self.from_rgb.1]);
        h = g.leaky_relu(h, LRELU_SLOPE);
        for &(w, b) in &self.convs {
            h = g.conv(h, p[w]);
            h = g.channel_bias(h, p[b]);
            h = g.leaky_relu(h, LRELU_SLOPE);
            h = g.scale(h, LRELU_GAIN);
            h = g.avg_pool2(h);
        }
        let n = g.value(h).dim(0);
        let flat = g.value(h).numel() / n;
        h = g.reshape(h, &[n, flat]);
        let phi = g.linear(h, p[self.fc.0], Some(p[self.fc.1]));
        let phi = g.leaky_relu(phi, LRELU_SLOPE);
        let base = g.linear(phi, p[self.out.0], Some(p[self.out.1]));
        let ce = g.linear(onehot, p[self.class_embed], None);
        let cproj = g.mul(ce, phi);
        let cproj = g.sum_cols(cproj);
        let se = g.linear(scale, p[self.scale_embed], None);
        let sproj = g.mul(se, phi);
        let sproj = g.sum_cols(sproj);
        let logit = g.add(base, cproj);
        g.add(logit, sproj)
    }

    fn check(&self, images: &Tensor, labels: &[usize], scale: &Tensor) -> Result<()> {
        let s = self.config.in_size;
        if images.shape().len() != 4 || images.shape()[1..] != [3, s, s] {
            return Err(Error::Shape(format!("discriminator expects [n, 3, {s}, {s}], got {:?}", images.shape())));
        }
        let n = images.dim(0);
        if labels.len() != n || scale.shape() != [n, SCALE_DIM] {
            return Err(Error::Shape("label / scale batch mismatch".into()));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= self.config.num_classes) {
            return Err(Error::Precondition(format!("label {c} out of range")));
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("discriminator input".into()));
        }
        Ok(())
    }

    pub fn logits(&self, images: &Tensor, labels: &[usize], scale: &Tensor) -> Result<Vec<f64>> {
        self.check(images, labels, scale)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let c = g.constant(one_hot(labels, self.config.num_classes));
        let s = g.constant(scale.clone());
        let out = self.forward(&mut g, &p, x, c, s);
        Ok(g.value(out).data().to_vec())
    }

    /// Logits and `∇_x Σ_i D(x_i)` for a batch.
    pub fn input_gradient(
        &self,
        images: &Tensor,
        labels: &[usize],
        scale: &Tensor,
    ) -> Result<(Vec<f64>, Tensor)> {
        self.check(images, labels, scale)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.input(images.clone());
        let c = g.constant(one_hot(labels, self.config.num_classes));
        let s = g.constant(scale.clone());
        let out = self.forward(&mut g, &p, x, c, s);
        let total = g.sum(out);
        let grads = g.backward(total);
        Ok((g.value(out).data().to_vec(), grads.get_or_zeros(x, images)))
    }

    pub fn discriminate(&self, image: &Tensor, c: &ClassLabel, scale_embed: &[f64]) -> Result<f64> {
        if image.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in discriminator input".into()));
        }
        if scale_embed.len() != SCALE_DIM {
            return Err(Error::Shape("scale embedding length".into()));
        }
        let s = self.config.in_size;
        let batch = image.clone().reshape(&[1, 3, s, s]);
        let scale = Tensor::from_vec(&[1, SCALE_DIM], scale_embed.to_vec());
        let logit = self.logits(&batch, &[c.index], &scale)?[0];
        if !logit.is_finite() {
            return Err(Error::NonFinite("discriminator logit".into()));
        }
        Ok(logit)
    }
}
