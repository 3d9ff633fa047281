//! Two-stage adversarial training.
//!
//! Stage 1 trains a global generator on fixed-resolution images. Stage 2
//! initializes a student from that generator and trains on mixed-resolution
//! patches, with an L1 consistency term that ties the student's patches to
//! the frozen teacher's full-frame output.
//!
//! Losses are the non-saturating logistic pair plus an R1 penalty on real
//! inputs. The R1 parameter gradient is a central finite-difference
//! Hessian-vector product: `∇θ ½‖∇x D‖² ≈ (∇θ D(x + εg) − ∇θ D(x − εg)) / 2ε`
//! with `g = ∇x D(x)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::data::{
    extract_patch_float, resample_matrix, sample_patch, window_matrix, DatasetManifest,
    ImageRecord, ImageStore, PatchSpec, Source,
};
use crate::error::{Error, Result};
use crate::metrics::{self, GeneratorRenderer, RandomConvExtractor};
use crate::model::{scale_batch, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tensor::{one_hot, softplus, Tensor};

pub const CHECKPOINT_HEADER: &str = "foodgan-checkpoint v1";

const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    MultiClass,
    SingleClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Global,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub stage: Stage,
    pub batch_size: usize,
    /// Generator updates to run.
    pub total_iterations: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub r1_gamma: f64,
    pub teacher_weight: f64,
    /// Generator updates between metric evaluations.
    pub fid_interval: u64,
    pub fid_samples: usize,
    pub pfid_patches: usize,
    /// Probability of drawing an HR record when both sources are present.
    pub hr_fraction: f64,
    pub seed: u64,
    pub extractor_seed: u64,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Class names in label order; empty when unnamed.
    pub classes: Vec<String>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::MultiClass,
            stage: Stage::Global,
            batch_size: 16,
            total_iterations: 1000,
            lr_g: 2.5e-3,
            lr_d: 2.5e-3,
            r1_gamma: 1.0,
            teacher_weight: 1.0,
            fid_interval: 20,
            fid_samples: 128,
            pfid_patches: 128,
            hr_fraction: 0.5,
            seed: 0,
            extractor_seed: 0,
            teacher_checkpoint: None,
            classes: Vec::new(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr_g > 0.0 && self.lr_g.is_finite() && self.lr_d > 0.0 && self.lr_d.is_finite()) {
            return bad("learning rates must be positive and finite");
        }
        if !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return bad("r1_gamma must be non-negative");
        }
        if !(self.teacher_weight >= 0.0 && self.teacher_weight.is_finite()) {
            return bad("teacher_weight must be non-negative");
        }
        if self.batch_size == 0 || self.fid_interval == 0 {
            return bad("batch_size and fid_interval must be positive");
        }
        if self.fid_samples < 2 || self.pfid_patches < 2 {
            return bad("metric sample counts must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.hr_fraction) {
            return bad("hr_fraction must lie in [0, 1]");
        }
        if self.stage == Stage::Patch && self.teacher_checkpoint.is_none() {
            return bad("PATCH stage requires a teacher checkpoint path");
        }
        self.generator.validate()?;
        if self.generator.out_size != self.discriminator.in_size {
            return bad("generator out_size must equal discriminator in_size");
        }
        if self.generator.num_classes != self.discriminator.num_classes {
            return bad("generator and discriminator class counts differ");
        }
        if !self.classes.is_empty() && self.classes.len() != self.generator.num_classes {
            return bad("class name list does not match the generator class count");
        }
        if self.mode == TrainMode::SingleClass && self.generator.num_classes != 1 {
            return bad("SINGLE_CLASS mode needs a one-class generator");
        }
        Ok(())
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: RngState,
    /// Best evaluation score so far: FID for the global stage, patch-FID for
    /// the patch stage.
    pub best_fid: Option<f64>,
    pub best_iteration: Option<u64>,
    pub best_generator: Option<ParamSet>,
}

impl TrainState {
    /// Generator parameters to hand on: the best-scoring snapshot when one
    /// exists, else the latest.
    pub fn selected_generator(&self) -> Result<Generator> {
        let params = self.best_generator.as_ref().unwrap_or(&self.generator);
        Generator::with_params(self.config.generator.clone(), params.clone())
    }

    pub fn latest_generator(&self) -> Result<Generator> {
        Generator::with_params(self.config.generator.clone(), self.generator.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("{CHECKPOINT_HEADER}\n").into_bytes();
        serde_json::to_writer(&mut out, self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        if header != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint(format!("unsupported header `{header}`")));
        }
        let state: TrainState = serde_json::from_str(body.trim_end())?;
        if !state.generator.all_finite() || !state.discriminator.all_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(state)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Anything that scores image batches and exposes `∇x Σ D(x)`.
pub trait Critic {
    fn logits(&self, images: &Tensor, labels: &[usize], scale: &Tensor) -> Result<Vec<f64>>;
    fn input_gradient(&self, images: &Tensor, labels: &[usize], scale: &Tensor)
        -> Result<(Vec<f64>, Tensor)>;
}

impl Critic for Discriminator {
    fn logits(&self, images: &Tensor, labels: &[usize], scale: &Tensor) -> Result<Vec<f64>> {
        Discriminator::logits(self, images, labels, scale)
    }

    fn input_gradient(
        &self,
        images: &Tensor,
        labels: &[usize],
        scale: &Tensor,
    ) -> Result<(Vec<f64>, Tensor)> {
        Discriminator::input_gradient(self, images, labels, scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub loss_g: f64,
    /// Logistic part of the discriminator loss.
    pub loss_d_adv: f64,
    pub r1: f64,
    /// `loss_d_adv + r1`.
    pub loss_d: f64,
}

/// `(γ/2) · mean_i ‖g_i‖²` over the leading axis of `grad_x`.
pub fn r1_penalty(grad_x: &Tensor, gamma: f64) -> f64 {
    let n = grad_x.dim(0);
    if n == 0 {
        return 0.0;
    }
    0.5 * gamma * grad_x.sq_norm() / n as f64
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Value-level non-saturating logistic losses with R1 on the real batch.
pub fn adversarial_losses(
    critic: &dyn Critic,
    real: &Tensor,
    fake: &Tensor,
    labels: &[usize],
    scale: &Tensor,
    r1_gamma: f64,
) -> Result<AdversarialLosses> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "real {:?} and fake {:?} batches differ",
            real.shape(),
            fake.shape()
        )));
    }
    let (real_logits, grad) = critic.input_gradient(real, labels, scale)?;
    let fake_logits = critic.logits(fake, labels, scale)?;
    let loss_g = mean(fake_logits.iter().map(|&l| softplus(-l)));
    let loss_d_adv = mean(fake_logits.iter().map(|&l| softplus(l)))
        + mean(real_logits.iter().map(|&l| softplus(-l)));
    let r1 = r1_penalty(&grad, r1_gamma);
    let out = AdversarialLosses {
        loss_g,
        loss_d_adv,
        r1,
        loss_d: loss_d_adv + r1,
    };
    if ![out.loss_g, out.loss_d].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("adversarial losses {out:?}")));
    }
    Ok(out)
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    assert_eq!(k, b.dim(0), "matmul inner dimension");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data()[p * n + j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Linear operators comparing a student patch with the teacher's global
/// output on a common grid: the region's extent in teacher pixels.
#[derive(Clone, Debug)]
pub struct ConsistencyOperators {
    /// Student `[S] -> [mh]` / `[S] -> [mw]`.
    pub student_rows: Tensor,
    pub student_cols: Tensor,
    /// Teacher `[G] -> [mh]` / `[G] -> [mw]`: bilinear crop to `S`, then
    /// the same reduction as the student.
    pub teacher_rows: Tensor,
    pub teacher_cols: Tensor,
}

impl ConsistencyOperators {
    pub fn new(spec: &PatchSpec, teacher_h: usize, teacher_w: usize) -> Result<Self> {
        spec.validate()?;
        let s = spec.out_size as usize;
        let eh = (spec.y1 - spec.y0) * teacher_h as f64;
        let ew = (spec.x1 - spec.x0) * teacher_w as f64;
        if eh < 1.0 || ew < 1.0 {
            return Err(Error::Precondition(format!(
                "patch covers {eh:.3} x {ew:.3} teacher pixels; at least 1 x 1 is required"
            )));
        }
        let (mh, mw) = (eh.round() as usize, ew.round() as usize);
        let student_rows = resample_matrix(s, mh);
        let student_cols = resample_matrix(s, mw);
        let teacher_rows = matmul(&student_rows, &window_matrix(teacher_h, spec.y0, spec.y1, s));
        let teacher_cols = matmul(&student_cols, &window_matrix(teacher_w, spec.x0, spec.x1, s));
        Ok(Self {
            student_rows,
            student_cols,
            teacher_rows,
            teacher_cols,
        })
    }

    fn teacher_target(&self, teacher_global: &Tensor) -> Tensor {
        let (c, h, w) = (teacher_global.dim(0), teacher_global.dim(1), teacher_global.dim(2));
        let (oh, ow) = (self.teacher_rows.dim(0), self.teacher_cols.dim(0));
        let mut out = vec![0.0; c * oh * ow];
        for (plane, dst) in teacher_global.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            crate::autograd::apply_separable(plane, h, w, &self.teacher_rows, &self.teacher_cols, dst);
        }
        Tensor::from_vec(&[1, c, oh, ow], out)
    }
}

fn check_consistency_inputs(student: &Tensor, teacher: &Tensor, spec: &PatchSpec) -> Result<()> {
    let s = spec.out_size as usize;
    if student.shape() != [3, s, s] {
        return Err(Error::Shape(format!("student patch {:?}, expected [3, {s}, {s}]", student.shape())));
    }
    if teacher.shape().len() != 3 || teacher.dim(0) != 3 {
        return Err(Error::Shape(format!("teacher image {:?}", teacher.shape())));
    }
    Ok(())
}

/// Mean absolute difference between the student patch and the teacher's
/// output over the same region, both reduced to the region's extent in
/// teacher pixels.
pub fn teacher_consistency_loss(
    student_patch: &Tensor,
    teacher_global: &Tensor,
    spec: &PatchSpec,
) -> Result<f64> {
    check_consistency_inputs(student_patch, teacher_global, spec)?;
    let ops = ConsistencyOperators::new(spec, teacher_global.dim(1), teacher_global.dim(2))?;
    let target = ops.teacher_target(teacher_global);
    let s = spec.out_size as usize;
    let (oh, ow) = (ops.student_rows.dim(0), ops.student_cols.dim(0));
    let mut reduced = vec![0.0; 3 * oh * ow];
    for (plane, dst) in student_patch.data().chunks(s * s).zip(reduced.chunks_mut(oh * ow)) {
        crate::autograd::apply_separable(plane, s, s, &ops.student_rows, &ops.student_cols, dst);
    }
    Ok(mean(reduced.iter().zip(target.data()).map(|(a, b)| (a - b).abs())))
}

/// Differentiable batch version: mean over samples of the per-sample loss.
fn consistency_graph(
    g: &mut Graph,
    student: Var,
    teacher_global: &Tensor,
    specs: &[PatchSpec],
) -> Result<Var> {
    let n = specs.len();
    let (c, th, tw) = (teacher_global.dim(1), teacher_global.dim(2), teacher_global.dim(3));
    let mut total: Option<Var> = None;
    for (i, spec) in specs.iter().enumerate() {
        let ops = ConsistencyOperators::new(spec, th, tw)?;
        let t = Tensor::from_vec(&[c, th, tw], teacher_global.row(i).to_vec());
        let target = g.constant(ops.teacher_target(&t));
        let xi = g.slice_batch(student, i);
        let reduced = g.separable(xi, ops.student_rows.clone(), ops.student_cols.clone());
        let diff = g.sub(reduced, target);
        let diff = g.abs(diff);
        let term = g.mean(diff);
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Precondition("empty batch".into()))?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Decoded training images plus the source split.
pub struct TrainData {
    pub manifest: DatasetManifest,
    pub store: ImageStore,
    lr: Vec<usize>,
    hr: Vec<usize>,
}

impl TrainData {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let store = ImageStore::load(&manifest)?;
        Self::from_parts(manifest, store)
    }

    pub fn from_parts(manifest: DatasetManifest, store: ImageStore) -> Result<Self> {
        if manifest.records.is_empty() {
            return Err(Error::Precondition("manifest has no records".into()));
        }
        if store.len() != manifest.records.len() {
            return Err(Error::Shape("image store does not match manifest".into()));
        }
        let pick = |s: Source| -> Vec<usize> {
            manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.source == s)
                .map(|(i, _)| i)
                .collect()
        };
        let (lr, hr) = (pick(Source::Lr), pick(Source::Hr));
        Ok(Self {
            manifest,
            store,
            lr,
            hr,
        })
    }

    pub fn num_lr(&self) -> usize {
        self.lr.len()
    }

    pub fn num_hr(&self) -> usize {
        self.hr.len()
    }

    fn record(&self, idx: usize) -> ImageRecord {
        metrics::stored_record(&self.manifest, &self.store, idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub r1: f64,
    pub teacher_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pfid: Option<f64>,
    pub wallclock: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub loss_g: f64,
    pub loss_d: f64,
    pub r1: f64,
    pub teacher_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub fid: f64,
    pub pfid: Option<f64>,
}

/// One batch worth of sampled conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDraw {
    pub records: Vec<usize>,
    pub labels: Vec<usize>,
    pub specs: Vec<PatchSpec>,
    pub z_d: Tensor,
    pub z_g: Tensor,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainData,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    iteration: u64,
    best_fid: Option<f64>,
    best_iteration: Option<u64>,
    best_generator: Option<ParamSet>,
    teacher: Option<Generator>,
    extractor: RandomConvExtractor,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh global-stage trainer.
    pub fn new(config: TrainConfig, data: &'a TrainData) -> Result<Self> {
        config.validate()?;
        if config.stage != Stage::Global {
            return Err(Error::Config("Trainer::new is for the GLOBAL stage".into()));
        }
        let generator = Generator::new(config.generator.clone())?;
        let discriminator = Discriminator::new(config.discriminator.clone())?;
        Self::assemble(config, data, generator, discriminator, None)
    }

    /// Patch-stage trainer: student and discriminator start from `teacher`.
    pub fn with_teacher(config: TrainConfig, data: &'a TrainData, teacher: &TrainState) -> Result<Self> {
        config.validate()?;
        if config.stage != Stage::Patch {
            return Err(Error::Config("with_teacher needs the PATCH stage".into()));
        }
        if config.generator != teacher.config.generator || config.discriminator != teacher.config.discriminator {
            return Err(Error::Config("model configuration differs from the teacher's".into()));
        }
        let frozen = teacher.selected_generator()?;
        let student = frozen.clone();
        let discriminator = Discriminator::with_params(config.discriminator.clone(), teacher.discriminator.clone())?;
        Self::assemble(config, data, student, discriminator, Some(frozen))
    }

    /// Continues from a checkpoint; the patch stage needs its teacher again.
    pub fn resume(state: TrainState, data: &'a TrainData, teacher: Option<&TrainState>) -> Result<Self> {
        state.config.validate()?;
        let frozen = match (state.config.stage, teacher) {
            (Stage::Patch, Some(t)) => Some(t.selected_generator()?),
            (Stage::Patch, None) => return Err(Error::Config("missing teacher checkpoint".into())),
            (Stage::Global, _) => None,
        };
        let generator = Generator::with_params(state.config.generator.clone(), state.generator)?;
        let discriminator = Discriminator::with_params(state.config.discriminator.clone(), state.discriminator)?;
        let mut t = Self::assemble(state.config, data, generator, discriminator, frozen)?;
        t.opt_g = state.opt_g;
        t.opt_d = state.opt_d;
        t.rng = state.rng.restore()?;
        t.iteration = state.iteration;
        t.best_fid = state.best_fid;
        t.best_iteration = state.best_iteration;
        t.best_generator = state.best_generator;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        data: &'a TrainData,
        generator: Generator,
        discriminator: Discriminator,
        teacher: Option<Generator>,
    ) -> Result<Self> {
        match config.stage {
            Stage::Global => {
                if data.num_hr() > 0 || data.num_lr() != data.manifest.records.len() {
                    return Err(Error::Precondition("global stage takes LR records only".into()));
                }
            }
            Stage::Patch => {
                if data.num_hr() == 0 {
                    return Err(Error::Precondition("patch stage needs HR records".into()));
                }
            }
        }
        let classes = data.manifest.num_classes();
        match config.mode {
            TrainMode::SingleClass if classes != 1 => {
                return Err(Error::Precondition(format!(
                    "SINGLE_CLASS mode needs a one-class manifest, got {classes} classes"
                )))
            }
            TrainMode::MultiClass if classes != config.generator.num_classes => {
                return Err(Error::Precondition(format!(
                    "manifest has {classes} classes, generator expects {}",
                    config.generator.num_classes
                )))
            }
            _ => {}
        }
        let s = config.generator.out_size as u32;
        for i in 0..data.manifest.records.len() {
            let r = data.record(i);
            if r.width.min(r.height) < s {
                return Err(Error::Precondition(format!(
                    "record {} is smaller than the {s}px output",
                    r.id
                )));
            }
        }
        let opt_g = Adam::new(AdamConfig::gan(config.lr_g), &generator.params);
        let opt_d = Adam::new(AdamConfig::gan(config.lr_d), &discriminator.params);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            extractor: RandomConvExtractor::new(config.extractor_seed),
            config,
            data,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iteration: 0,
            best_fid: None,
            best_iteration: None,
            best_generator: None,
            teacher,
            started: Instant::now(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn teacher(&self) -> Option<&Generator> {
        self.teacher.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.config.clone(),
            iteration: self.iteration,
            generator: self.generator.params.clone(),
            discriminator: self.discriminator.params.clone(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
            rng: RngState::capture(&self.rng),
            best_fid: self.best_fid,
            best_iteration: self.best_iteration,
            best_generator: self.best_generator.clone(),
        }
    }

    fn label_of(&self, record: usize) -> usize {
        match self.config.mode {
            TrainMode::SingleClass => 0,
            TrainMode::MultiClass => self.data.manifest.records[record].class_id,
        }
    }

    /// Samples records, labels, patch specs and latents for one iteration.
    pub fn draw_batch(&mut self) -> Result<BatchDraw> {
        let n = self.config.batch_size;
        let s = self.config.generator.out_size as u32;
        let mut records = Vec::with_capacity(n);
        let mut specs = Vec::with_capacity(n);
        for _ in 0..n {
            let use_hr = match self.config.stage {
                Stage::Global => false,
                Stage::Patch if self.data.lr.is_empty() => true,
                Stage::Patch => self.rng.random_bool(self.config.hr_fraction),
            };
            let pool = if use_hr { &self.data.hr } else { &self.data.lr };
            let idx = pool[self.rng.random_range(0..pool.len())];
            let rec = self.data.record(idx);
            let spec = match self.config.stage {
                Stage::Global => PatchSpec::full_frame(rec.width, rec.height, s),
                Stage::Patch => sample_patch(&rec, &mut self.rng, s, s)?,
            };
            records.push(idx);
            specs.push(spec);
        }
        let labels = records.iter().map(|&r| self.label_of(r)).collect();
        let zd = self.config.generator.z_dim;
        let z_d = Tensor::randn(&[n, zd], 1.0, &mut self.rng);
        let z_g = Tensor::randn(&[n, zd], 1.0, &mut self.rng);
        Ok(BatchDraw {
            records,
            labels,
            specs,
            z_d,
            z_g,
        })
    }

    fn real_batch(&self, draw: &BatchDraw) -> Result<Tensor> {
        let patches = draw
            .records
            .iter()
            .zip(&draw.specs)
            .map(|(&r, spec)| extract_patch_float(self.data.store.get(r), spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&patches))
    }

    fn d_param_grads(&self, images: &Tensor, labels: &[usize], scale: &Tensor) -> Vec<Tensor> {
        let d = &self.discriminator;
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, true);
        let x = g.constant(images.clone());
        let c = g.constant(one_hot(labels, d.config.num_classes));
        let s = g.constant(scale.clone());
        let out = d.forward(&mut g, &p, x, c, s);
        let total = g.sum(out);
        let grads = g.backward(total);
        d.params.collect_grads(&grads, &p)
    }

    /// R1 value and its parameter gradient.
    fn r1_term(&self, real: &Tensor, labels: &[usize], scale: &Tensor) -> Result<(f64, Option<Vec<Tensor>>)> {
        let gamma = self.config.r1_gamma;
        if gamma == 0.0 {
            return Ok((0.0, None));
        }
        let (_, gx) = self.discriminator.input_gradient(real, labels, scale)?;
        let value = r1_penalty(&gx, gamma);
        let peak = gx.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return Ok((value, None));
        }
        let eps = 1e-4 / peak;
        let mut plus = real.clone();
        plus.axpy(eps, &gx);
        let mut minus = real.clone();
        minus.axpy(-eps, &gx);
        let gp = self.d_param_grads(&plus, labels, scale);
        let gm = self.d_param_grads(&minus, labels, scale);
        let k = gamma / (2.0 * eps * real.dim(0) as f64);
        let grads = gp
            .into_iter()
            .zip(gm)
            .map(|(mut a, b)| {
                a.axpy(-1.0, &b);
                a.map(|v| v * k)
            })
            .collect();
        Ok((value, Some(grads)))
    }

    fn d_step(&mut self, draw: &BatchDraw, real: &Tensor) -> Result<(f64, f64)> {
        let fake = self.generator.render(&draw.z_d, &draw.labels, &draw.specs)?;
        let scale = scale_batch(&draw.specs);
        let d = &self.discriminator;
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, true);
        let c = g.constant(one_hot(&draw.labels, d.config.num_classes));
        let s = g.constant(scale.clone());
        let xr = g.constant(real.clone());
        let xf = g.constant(fake);
        let lr = d.forward(&mut g, &p, xr, c, s);
        let lf = d.forward(&mut g, &p, xf, c, s);
        let neg = g.scale(lr, -1.0);
        let sr = g.softplus(neg);
        let sf = g.softplus(lf);
        let mr = g.mean(sr);
        let mf = g.mean(sf);
        let loss = g.add(mr, mf);
        let loss_adv = g.value(loss).item();
        let mut grads = d.params.collect_grads(&g.backward(loss), &p);
        let (r1, r1_grads) = self.r1_term(real, &draw.labels, &scale)?;
        if let Some(rg) = r1_grads {
            for (a, b) in grads.iter_mut().zip(&rg) {
                a.add_assign(b);
            }
        }
        let loss_d = loss_adv + r1;
        if !loss_d.is_finite() || !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!(
                "discriminator step at iteration {}: loss_adv={loss_adv}, r1={r1}",
                self.iteration
            )));
        }
        self.opt_d.update(&mut self.discriminator.params, &grads);
        Ok((loss_d, r1))
    }

    fn g_step(&mut self, draw: &BatchDraw) -> Result<(f64, f64)> {
        let teacher_global = match (&self.teacher, self.config.stage) {
            (Some(t), Stage::Patch) => {
                let spec = t.global_spec();
                Some(t.render(&draw.z_g, &draw.labels, &vec![spec; draw.labels.len()])?)
            }
            _ => None,
        };
        let gen = &self.generator;
        let d = &self.discriminator;
        let mut g = Graph::new();
        let pg = gen.params.bind(&mut g, true);
        let pd = d.params.bind(&mut g, false);
        let fake = gen.forward(&mut g, &pg, &draw.z_g, &draw.labels, &draw.specs);
        let c = g.constant(one_hot(&draw.labels, d.config.num_classes));
        let s = g.constant(scale_batch(&draw.specs));
        let logits = d.forward(&mut g, &pd, fake, c, s);
        let neg = g.scale(logits, -1.0);
        let sp = g.softplus(neg);
        let adv = g.mean(sp);
        let loss_g = g.value(adv).item();
        let mut teacher_loss = 0.0;
        let mut total = adv;
        if let Some(tg) = &teacher_global {
            let tl = consistency_graph(&mut g, fake, tg, &draw.specs)?;
            teacher_loss = g.value(tl).item();
            if self.config.teacher_weight > 0.0 {
                let weighted = g.scale(tl, self.config.teacher_weight);
                total = g.add(adv, weighted);
            }
        }
        let grads = gen.params.collect_grads(&g.backward(total), &pg);
        if !loss_g.is_finite() || !teacher_loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!(
                "generator step at iteration {}: loss_g={loss_g}, teacher={teacher_loss}",
                self.iteration
            )));
        }
        self.opt_g.update(&mut self.generator.params, &grads);
        Ok((loss_g, teacher_loss))
    }

    /// One discriminator update followed by one generator update. On a
    /// non-finite loss or parameter the trainer is rolled back to its state
    /// before the call.
    pub fn step(&mut self) -> Result<StepLosses> {
        let snapshot = self.state();
        let result = self.try_step();
        if result.is_err() {
            let rng = snapshot.rng.restore()?;
            self.generator.params = snapshot.generator;
            self.discriminator.params = snapshot.discriminator;
            self.opt_g = snapshot.opt_g;
            self.opt_d = snapshot.opt_d;
            self.rng = rng;
        }
        result
    }

    fn try_step(&mut self) -> Result<StepLosses> {
        let draw = self.draw_batch()?;
        let real = self.real_batch(&draw)?;
        let (loss_d, r1) = self.d_step(&draw, &real)?;
        let (loss_g, teacher_loss) = self.g_step(&draw)?;
        if !self.generator.params.all_finite() || !self.discriminator.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after iteration {}",
                self.iteration
            )));
        }
        self.iteration += 1;
        Ok(StepLosses {
            loss_g,
            loss_d,
            r1,
            teacher_loss,
        })
    }

    /// Full-frame reals at the model resolution.
    pub fn global_reals(&self) -> Result<Vec<Tensor>> {
        global_reals(self.data, self.config.generator.out_size)
    }

    /// Global samples for evaluation: a fixed latent stream, labels cycling
    /// through the classes.
    pub fn global_samples(generator: &Generator, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EVAL_STREAM);
        let c = generator.config.num_classes;
        let s = generator.config.out_size;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let m = (n - start).min(64);
            let z = Tensor::randn(&[m, generator.config.z_dim], 1.0, &mut rng);
            let labels: Vec<usize> = (start..start + m).map(|i| i % c).collect();
            let imgs = generator.render(&z, &labels, &vec![generator.global_spec(); m])?;
            out.extend((0..m).map(|i| Tensor::from_vec(&[3, s, s], imgs.row(i).to_vec())));
            start += m;
        }
        Ok(out)
    }

    /// FID of full-frame samples against the LR reals, plus patch-FID over
    /// all records in the patch stage.
    pub fn evaluate(&self, generator: &Generator) -> Result<Evaluation> {
        let eval_seed = self.config.seed ^ 0x00E0_A1E0;
        let fake = Self::global_samples(generator, self.config.fid_samples, eval_seed)?;
        let real = self.global_reals()?;
        let fid = if real.len() >= 2 {
            metrics::fid_images(&real, &fake, &self.extractor, eval_seed)?.value
        } else {
            f64::NAN
        };
        let pfid = match self.config.stage {
            Stage::Global => None,
            Stage::Patch => Some(
                metrics::pfid(
                    &self.data.manifest,
                    &self.data.store,
                    &GeneratorRenderer::new(generator),
                    &self.extractor,
                    self.config.pfid_patches,
                    self.config.generator.out_size as u32,
                    eval_seed,
                )?
                .report
                .value,
            ),
        };
        Ok(Evaluation { fid, pfid })
    }

    fn record_evaluation(&mut self) -> Result<Evaluation> {
        let eval = self.evaluate(&self.generator)?;
        let score = eval.pfid.unwrap_or(eval.fid);
        if score.is_finite() && self.best_fid.is_none_or(|b| score < b) {
            self.best_fid = Some(score);
            self.best_iteration = Some(self.iteration);
            self.best_generator = Some(self.generator.params.clone());
        }
        Ok(eval)
    }

    /// Runs until `total_iterations`, evaluating every `fid_interval`
    /// generator updates and at the end. Each iteration's entry is passed
    /// to `on_entry`.
    pub fn run(&mut self, mut on_entry: impl FnMut(&LogEntry) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.total_iterations {
            let losses = self.step()?;
            let due = self.iteration % self.config.fid_interval == 0
                || self.iteration == self.config.total_iterations;
            let eval = if due { Some(self.record_evaluation()?) } else { None };
            on_entry(&LogEntry {
                iteration: self.iteration,
                loss_g: losses.loss_g,
                loss_d: losses.loss_d,
                r1: losses.r1,
                teacher_loss: losses.teacher_loss,
                fid: eval.map(|e| e.fid),
                pfid: eval.and_then(|e| e.pfid),
                wallclock: self.started.elapsed().as_secs_f64(),
            })?;
        }
        Ok(())
    }
}

/// Writes log entries as JSON lines.
pub struct JsonlLog<W: Write> {
    out: W,
}

impl<W: Write> JsonlLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("training log", e))
    }
}

/// Full-frame LR reals resampled to `out_size`.
pub fn global_reals(data: &TrainData, out_size: usize) -> Result<Vec<Tensor>> {
    let s = out_size as u32;
    data.lr
        .iter()
        .map(|&i| {
            let r = data.record(i);
            extract_patch_float(data.store.get(i), &PatchSpec::full_frame(r.width, r.height, s))
        })
        .collect()
}

/// Global-stage training on LR records.
pub fn train_stage1(
    data: &TrainData,
    config: TrainConfig,
    on_entry: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<TrainState> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.run(on_entry)?;
    Ok(trainer.state())
}

/// Patch-stage training from the teacher checkpoint named in the config.
pub fn train_stage2(
    data: &TrainData,
    config: TrainConfig,
    on_entry: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    let path = config
        .teacher_checkpoint
        .clone()
        .ok_or_else(|| Error::Config("missing teacher checkpoint".into()))?;
    let teacher = TrainState::load(&path)?;
    train_stage2_with(data, config, &teacher, on_entry)
}

pub fn train_stage2_with(
    data: &TrainData,
    config: TrainConfig,
    teacher: &TrainState,
    on_entry: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<TrainState> {
    let mut trainer = Trainer::with_teacher(config, data, teacher)?;
    trainer.run(on_entry)?;
    Ok(trainer.state())
}
