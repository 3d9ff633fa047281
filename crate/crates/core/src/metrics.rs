//! Gaussian feature statistics, FID and the patch-FID protocol.
//!
//! Covariances use the unbiased `N - 1` denominator. The matrix square root
//! goes through the symmetric form `eig(√Σa Σb √Σa)` with negative
//! eigenvalues clamped to zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    extract_patch_float, sample_patch, DatasetManifest, ImageRecord, ImageStore, PatchSpec,
};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::tensor::{self, ConvGeom, Tensor};

/// Absolute values from the default extractor are only comparable with
/// each other, never with Inception-based scores.
pub const COMPARABILITY_NOTE: &str =
    "absolute values depend on the extractor; compare orderings and deltas only";

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_moments(n: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape("covariance does not match mean".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        Ok(Self { n, mean, cov: sym })
    }
}

/// Mergeable `(n, mean, centred outer-product sum)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    fn from_rows(features: &Tensor) -> Self {
        let (n, d) = (features.dim(0), features.dim(1));
        let mut mean = DVector::zeros(d);
        for r in 0..n {
            for (j, v) in features.row(r).iter().enumerate() {
                mean[j] += v;
            }
        }
        if n > 0 {
            mean /= n as f64;
        }
        let mut centred = DMatrix::zeros(n, d);
        for r in 0..n {
            for (j, v) in features.row(r).iter().enumerate() {
                centred[(r, j)] = v - mean[j];
            }
        }
        let m2 = centred.transpose() * &centred;
        Self { n, mean, m2 }
    }

    pub fn push_chunk(&mut self, features: &Tensor) -> Result<()> {
        check_features(features, 0)?;
        if features.dim(1) != self.mean.len() {
            return Err(Error::Shape("feature width changed between chunks".into()));
        }
        let chunk = Self::from_rows(features);
        self.merge(&chunk);
        Ok(())
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &StatsAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let n = self.n + other.n;
        let delta = &other.mean - &self.mean;
        let w = (self.n * other.n) as f64 / n as f64;
        self.m2 += &other.m2 + &delta * delta.transpose() * w;
        self.mean += delta * (other.n as f64 / n as f64);
        self.n = n;
    }

    pub fn finish(&self) -> Result<GaussianStats> {
        if self.n < 2 {
            return Err(Error::Precondition(format!(
                "covariance needs at least 2 samples, got {}",
                self.n
            )));
        }
        GaussianStats::from_moments(self.n, self.mean.clone(), &self.m2 / (self.n - 1) as f64)
    }
}

fn check_features(features: &Tensor, min_rows: usize) -> Result<()> {
    if features.shape().len() != 2 {
        return Err(Error::Shape("features must be an [n, d] matrix".into()));
    }
    if features.dim(0) < min_rows {
        return Err(Error::Precondition(format!(
            "need at least {min_rows} feature rows, got {}",
            features.dim(0)
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    Ok(())
}

pub fn accumulate_stats(features: &Tensor) -> Result<GaussianStats> {
    check_features(features, 2)?;
    StatsAccumulator::from_rows(features).finish()
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    max.abs() / min.abs().max(f64::MIN_POSITIVE)
}

/// Fréchet distance between two Gaussians.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = symmetric_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = (mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "fid is not finite (cond(Σa) = {:.3e}, cond(Σb) = {:.3e})",
            condition_number(&a.cov),
            condition_number(&b.cov)
        )));
    }
    Ok(value)
}

/// Deterministic image embedder: `images -> [n, dim]`.
pub trait FeatureExtractor {
    /// Name, seed and version; recorded in every metric report.
    fn descriptor(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, images: &[Tensor]) -> Result<Tensor>;
}

/// Two random 3x3 convolution layers; features are the per-channel spatial
/// mean and standard deviation of both activations (`d = 64`).
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
}

const EXTRACTOR_WIDTH: usize = 16;

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F1D0);
        let c = EXTRACTOR_WIDTH;
        let w1 = Tensor::randn(&[c, 3, 3, 3], (1.0f64 / 27.0).sqrt(), &mut rng);
        let b1 = (0..c).map(|_| rng.random_range(-0.1..0.1)).collect();
        let w2 = Tensor::randn(&[c, c, 3, 3], (2.0 / (9.0 * c as f64)).sqrt(), &mut rng);
        let b2 = (0..c).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self { seed, w1, b1, w2, b2 }
    }

    fn layer(x: &[f64], cin: usize, h: usize, w: usize, weight: &Tensor, bias: &[f64]) -> Vec<f64> {
        let cout = bias.len();
        let geom = ConvGeom {
            cin,
            cout,
            height: h,
            width: w,
            kernel: 3,
        };
        let mut out = vec![0.0; cout * h * w];
        tensor::conv_forward(geom, x, weight.data(), &mut out);
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            for v in plane {
                *v = tensor::leaky_relu(*v + bias[ch], 0.2);
            }
        }
        out
    }

    fn moments(act: &[f64], channels: usize, out: &mut Vec<f64>) {
        let plane = act.len() / channels;
        for ch in act.chunks(plane) {
            let m = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
            out.push(m);
            out.push(var.sqrt());
        }
    }

    fn embed_one(&self, img: &Tensor) -> Result<Vec<f64>> {
        if img.shape().len() != 3 || img.dim(0) != 3 || img.dim(1) < 2 || img.dim(2) < 2 {
            return Err(Error::Shape(format!("extractor expects [3, h, w], got {:?}", img.shape())));
        }
        let (h, w) = (img.dim(1), img.dim(2));
        let c = EXTRACTOR_WIDTH;
        let a1 = Self::layer(img.data(), 3, h, w, &self.w1, &self.b1);
        let mut feats = Vec::with_capacity(4 * c);
        Self::moments(&a1, c, &mut feats);
        let (ph, pw) = (h / 2, w / 2);
        let mut pooled = vec![0.0; c * ph * pw];
        tensor::avg_pool2(c, h, w, &a1, &mut pooled);
        let a2 = Self::layer(&pooled, c, ph, pw, &self.w2, &self.b2);
        Self::moments(&a2, c, &mut feats);
        Ok(feats)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn descriptor(&self) -> String {
        format!("random-conv-d64-seed{}-v1", self.seed)
    }

    fn dim(&self) -> usize {
        4 * EXTRACTOR_WIDTH
    }

    fn embed(&self, images: &[Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.dim());
        for img in images {
            data.extend(self.embed_one(img)?);
        }
        Ok(Tensor::from_vec(&[images.len(), self.dim()], data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub extractor: String,
    pub n_real: usize,
    pub n_fake: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_patches: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec_digest: Option<String>,
    pub covariance: String,
    pub note: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// FID between two image sets under `extractor`.
pub fn fid_images(
    real: &[Tensor],
    fake: &[Tensor],
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<MetricReport> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Precondition(format!(
            "fid needs at least 2 images per side (real {}, fake {})",
            real.len(),
            fake.len()
        )));
    }
    let a = accumulate_stats(&extractor.embed(real)?)?;
    let b = accumulate_stats(&extractor.embed(fake)?)?;
    Ok(MetricReport {
        metric: "fid".into(),
        value: fid(&a, &b)?,
        extractor: extractor.descriptor(),
        n_real: real.len(),
        n_fake: fake.len(),
        n_patches: None,
        seed,
        spec_digest: None,
        covariance: "unbiased".into(),
        note: COMPARABILITY_NOTE.into(),
        config_digest: None,
    })
}

/// One fake-side request of the patch protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchRequest {
    pub spec: PatchSpec,
    pub class_id: usize,
    pub record_index: usize,
}

/// Anything that can produce images for a list of patch requests.
pub trait PatchRenderer {
    fn render(&self, requests: &[PatchRequest], seed: u64) -> Result<Vec<Tensor>>;
}

/// Renders requests with fresh latents; single-class generators ignore the
/// request's class.
pub struct GeneratorRenderer<'a> {
    pub generator: &'a Generator,
    pub batch: usize,
}

impl<'a> GeneratorRenderer<'a> {
    pub fn new(generator: &'a Generator) -> Self {
        Self { generator, batch: 64 }
    }
}

impl PatchRenderer for GeneratorRenderer<'_> {
    fn render(&self, requests: &[PatchRequest], seed: u64) -> Result<Vec<Tensor>> {
        let cfg = &self.generator.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFA4E_0000);
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.batch.max(1)) {
            let z = Tensor::randn(&[chunk.len(), cfg.z_dim], 1.0, &mut rng);
            let labels: Vec<usize> = chunk
                .iter()
                .map(|r| if cfg.num_classes == 1 { 0 } else { r.class_id })
                .collect();
            let specs: Vec<PatchSpec> = chunk.iter().map(|r| r.spec).collect();
            let imgs = self.generator.render(&z, &labels, &specs)?;
            let s = specs[0].out_size as usize;
            for i in 0..chunk.len() {
                out.push(Tensor::from_vec(&[3, s, s], imgs.row(i).to_vec()));
            }
        }
        Ok(out)
    }
}

pub fn spec_digest(specs: impl IntoIterator<Item = PatchSpec>) -> String {
    let mut h = Sha256::new();
    for s in specs {
        h.update(s.canonical().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Record `idx` with its dimensions replaced by the stored image's, which
/// differ from the native file size for resized LR records.
pub fn stored_record(manifest: &DatasetManifest, store: &ImageStore, idx: usize) -> ImageRecord {
    let img = store.get(idx);
    ImageRecord {
        width: img.dim(2) as u32,
        height: img.dim(1) as u32,
        ..manifest.records[idx].clone()
    }
}

/// Draws `n` patch requests over records admitting `out_size` patches.
pub fn sample_patch_requests(
    manifest: &DatasetManifest,
    store: &ImageStore,
    n: usize,
    out_size: u32,
    seed: u64,
) -> Result<Vec<PatchRequest>> {
    if store.len() != manifest.records.len() {
        return Err(Error::Shape("image store does not match manifest".into()));
    }
    let records: Vec<ImageRecord> = (0..store.len()).map(|i| stored_record(manifest, store, i)).collect();
    let eligible: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.width.min(r.height) >= out_size)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Precondition(format!(
            "no records admit {out_size}px patches"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let idx = eligible[rng.random_range(0..eligible.len())];
            let rec = &records[idx];
            Ok(PatchRequest {
                spec: sample_patch(rec, &mut rng, out_size, out_size)?,
                class_id: rec.class_id,
                record_index: idx,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfidRun {
    pub report: MetricReport,
    pub real_digest: String,
    pub fake_digest: String,
}

/// Patch-FID: real patches cropped at native resolution and fake patches
/// rendered for the very same spec list.
pub fn pfid(
    manifest: &DatasetManifest,
    store: &ImageStore,
    renderer: &dyn PatchRenderer,
    extractor: &dyn FeatureExtractor,
    n_patches: usize,
    out_size: u32,
    seed: u64,
) -> Result<PfidRun> {
    let requests = sample_patch_requests(manifest, store, n_patches, out_size, seed)?;
    let mut real_specs = Vec::with_capacity(requests.len());
    let mut real = Vec::with_capacity(requests.len());
    for r in &requests {
        real.push(extract_patch_float(store.get(r.record_index), &r.spec)?);
        real_specs.push(r.spec);
    }
    let fake_requests = requests.clone();
    let fake = renderer.render(&fake_requests, seed)?;
    if fake.len() != requests.len() {
        return Err(Error::Shape("renderer returned a different number of patches".into()));
    }
    let real_digest = spec_digest(real_specs);
    let fake_digest = spec_digest(fake_requests.iter().map(|r| r.spec));
    if real_digest != fake_digest {
        return Err(Error::Precondition("real and fake spec lists diverged".into()));
    }
    let mut report = fid_images(&real, &fake, extractor, seed)?;
    report.metric = "pfid".into();
    report.n_patches = Some(n_patches);
    report.spec_digest = Some(real_digest.clone());
    Ok(PfidRun {
        report,
        real_digest,
        fake_digest,
    })
}
