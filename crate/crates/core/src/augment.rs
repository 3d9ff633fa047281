//! Synthetic-augmentation study and the inter-class entanglement probe.
//!
//! Three arms share one test set: a real block `A`, `A` plus an equal number
//! of synthetic images, and `A` plus a second real block. Real blocks are
//! split evenly between LR and HR sources and balanced across classes.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::data::{resample_float, DatasetManifest, ImageStore, Source};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "REAL_200")]
    Real,
    #[serde(rename = "REAL_200_PLUS_SYN_200")]
    RealPlusSynthetic,
    #[serde(rename = "REAL_400")]
    DoubleReal,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Real, Arm::RealPlusSynthetic, Arm::DoubleReal];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Real => "REAL_200",
            Arm::RealPlusSynthetic => "REAL_200_PLUS_SYN_200",
            Arm::DoubleReal => "REAL_400",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.label().eq_ignore_ascii_case(s))
    }
}

/// Block sizes; the full-scale study uses 200 real / 100 test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmSizes {
    pub real_block: usize,
    pub test: usize,
}

impl Default for ArmSizes {
    fn default() -> Self {
        Self {
            real_block: 200,
            test: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub class_id: usize,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub arm: Arm,
    pub classes: Vec<String>,
    pub train_records: Vec<SampleRef>,
    pub test_records: Vec<SampleRef>,
    /// Block A: the real training records every arm of this seed shares.
    /// Validation is drawn from here so all arms select on the same images.
    pub shared_block: Vec<SampleRef>,
    pub seed: u64,
}

impl ExperimentSetup {
    pub fn synthetic_count(&self) -> usize {
        self.train_records
            .iter()
            .filter(|r| r.source == Source::Synthetic)
            .count()
    }

    pub fn real_count(&self) -> usize {
        self.train_records.len() - self.synthetic_count()
    }

    /// Digest of the sorted test ids; identical across arms of one seed.
    pub fn test_digest(&self) -> String {
        let mut ids: Vec<&str> = self.test_records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        let mut h = Sha256::new();
        for id in ids {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// `total` split over `parts` as evenly as possible, earlier parts first.
fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

fn shuffled_pool(
    manifest: &DatasetManifest,
    class_id: usize,
    source: Source,
    rng: &mut ChaCha8Rng,
) -> Vec<SampleRef> {
    let mut pool: Vec<SampleRef> = manifest
        .records
        .iter()
        .filter(|r| r.class_id == class_id && r.source == source)
        .map(|r| SampleRef {
            id: r.id.clone(),
            class_id,
            source,
        })
        .collect();
    pool.shuffle(rng);
    pool
}

/// Deterministic arm composition. Test records are drawn first, then the
/// shared real block, then the second real block or the synthetic block.
pub fn build_experiment(
    arm: Arm,
    real: &DatasetManifest,
    synthetic: Option<&DatasetManifest>,
    sizes: ArmSizes,
    seed: u64,
) -> Result<ExperimentSetup> {
    let c = real.num_classes();
    if c == 0 {
        return Err(Error::Precondition("real manifest has no classes".into()));
    }
    let test_lr = split_even(sizes.test / 2, c);
    let test_hr = split_even(sizes.test - sizes.test / 2, c);
    let block_lr = split_even(sizes.real_block / 2, c);
    let block_hr = split_even(sizes.real_block - sizes.real_block / 2, c);
    let second_blocks = usize::from(arm == Arm::DoubleReal);

    let mut deficits = Vec::new();
    let mut test_records = Vec::new();
    let mut train_records = Vec::new();
    let mut shared_block = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in 0..c {
        for (source, n_test, n_block) in [
            (Source::Lr, test_lr[class], block_lr[class]),
            (Source::Hr, test_hr[class], block_hr[class]),
        ] {
            // The pool is shuffled for every arm so that test and block A
            // coincide regardless of which arm is being built.
            let pool = shuffled_pool(real, class, source, &mut rng);
            let need = n_test + n_block * (1 + second_blocks);
            if pool.len() < need {
                deficits.push(format!(
                    "class `{}` {source}: need {need}, have {} (short by {})",
                    real.classes[class],
                    pool.len(),
                    need - pool.len()
                ));
                continue;
            }
            test_records.extend_from_slice(&pool[..n_test]);
            shared_block.extend_from_slice(&pool[n_test..n_test + n_block]);
            train_records.extend_from_slice(&pool[n_test..need]);
        }
    }

    if arm == Arm::RealPlusSynthetic {
        let syn = synthetic.ok_or_else(|| {
            Error::InsufficientPool(format!(
                "arm {} needs a synthetic pool of {} images",
                arm.label(),
                sizes.real_block
            ))
        })?;
        if syn.classes != real.classes {
            return Err(Error::Precondition("synthetic pool classes differ from the real manifest".into()));
        }
        let mut syn_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4E00);
        for (class, n) in split_even(sizes.real_block, c).into_iter().enumerate() {
            let mut pool: Vec<SampleRef> = syn
                .records
                .iter()
                .filter(|r| r.class_id == class)
                .map(|r| SampleRef {
                    id: r.id.clone(),
                    class_id: class,
                    source: Source::Synthetic,
                })
                .collect();
            pool.shuffle(&mut syn_rng);
            if pool.len() < n {
                deficits.push(format!(
                    "class `{}` synthetic: need {n}, have {} (short by {})",
                    real.classes[class],
                    pool.len(),
                    n - pool.len()
                ));
                continue;
            }
            train_records.extend_from_slice(&pool[..n]);
        }
    }
    if !deficits.is_empty() {
        return Err(Error::InsufficientPool(deficits.join("; ")));
    }
    Ok(ExperimentSetup {
        arm,
        classes: real.classes.clone(),
        train_records,
        test_records,
        shared_block,
        seed,
    })
}

/// Decoded images keyed by `(is_synthetic, id)`, resized to the classifier
/// input.
pub struct ImageBank {
    input_size: usize,
    images: HashMap<(bool, String), Tensor>,
}

impl ImageBank {
    pub fn load(real: &DatasetManifest, synthetic: Option<&DatasetManifest>, input_size: usize) -> Result<Self> {
        let mut bank = Self {
            input_size,
            images: HashMap::new(),
        };
        for (manifest, syn) in std::iter::once((real, false)).chain(synthetic.map(|m| (m, true))) {
            let store = ImageStore::load(manifest)?;
            for (i, r) in manifest.records.iter().enumerate() {
                bank.insert(syn || r.source == Source::Synthetic, &r.id, store.get(i));
            }
        }
        Ok(bank)
    }

    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            images: HashMap::new(),
        }
    }

    /// Adds an image in the model domain, resampled to the input size.
    pub fn insert(&mut self, synthetic: bool, id: &str, image: &Tensor) {
        let s = self.input_size;
        let img = if image.dim(1) == s && image.dim(2) == s {
            image.clone()
        } else {
            resample_float(image, s, s)
        };
        self.images.insert((synthetic, id.to_string()), img);
    }

    pub fn get(&self, r: &SampleRef) -> Result<&Tensor> {
        self.images
            .get(&(r.source == Source::Synthetic, r.id.clone()))
            .ok_or_else(|| Error::Precondition(format!("image `{}` not loaded", r.id)))
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Channel width of the first stage; the second stage doubles it.
    pub width: usize,
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Chance-level control: train on permuted labels.
    pub shuffle_labels: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 64,
            input_size: 32,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            val_fraction: 0.2,
            seed: 0,
            shuffle_labels: false,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier width, epochs and batch_size must be positive".into()));
        }
        if self.input_size < 4 || !self.input_size.is_power_of_two() {
            return Err(Error::Config("classifier input_size must be a power of two >= 4".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("classifier lr must be positive and val_fraction in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Two-stage residual convnet: stem, residual block, pool, widen, residual
/// block, pool, global average, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub num_classes: usize,
    pub width: usize,
    pub params: ParamSet,
}

impl Classifier {
    pub fn new(num_classes: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut conv = |params: &mut ParamSet, name: &str, cin: usize, cout: usize, scale: f64| {
            let std = scale * (2.0 / (9 * cin) as f64).sqrt();
            params.push(format!("{name}.weight"), Tensor::randn(&[cout, cin, 3, 3], std, &mut rng), 1.0);
            params.push(format!("{name}.bias"), Tensor::zeros(&[cout]), 1.0);
        };
        let w2 = 2 * width;
        conv(&mut params, "stem", 3, width, 1.0);
        conv(&mut params, "res1.a", width, width, 1.0);
        conv(&mut params, "res1.b", width, width, 0.5);
        conv(&mut params, "widen", width, w2, 1.0);
        conv(&mut params, "res2.a", w2, w2, 1.0);
        conv(&mut params, "res2.b", w2, w2, 0.5);
        let head = Tensor::randn(&[num_classes, w2], (1.0 / w2 as f64).sqrt(), &mut rng);
        params.push("head.weight", head, 1.0);
        params.push("head.bias", Tensor::zeros(&[num_classes]), 1.0);
        Self {
            num_classes,
            width,
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn conv_block(g: &mut Graph, p: &[Var], first: usize, x: Var) -> Var {
        let h = g.conv(x, p[first]);
        g.channel_bias(h, p[first + 1])
    }

    /// `x: [n, 3, s, s]` → logits `[n, classes]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut h = Self::conv_block(g, p, 0, x);
        h = g.relu(h);
        for (a, b) in [(2, 4), (8, 10)] {
            if a == 8 {
                h = g.avg_pool2(h);
                h = Self::conv_block(g, p, 6, h);
                h = g.relu(h);
            }
            let r = Self::conv_block(g, p, a, h);
            let r = g.relu(r);
            let r = Self::conv_block(g, p, b, r);
            h = g.add(h, r);
            h = g.relu(h);
        }
        h = g.avg_pool2(h);
        let pooled = g.mean_spatial(h);
        g.linear(pooled, p[12], Some(p[13]))
    }

    pub fn logits(&self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Ok(Tensor::zeros(&[0, self.num_classes]));
        }
        let mut out = Vec::with_capacity(images.len() * self.num_classes);
        for chunk in images.chunks(128) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(Tensor::stack(chunk));
            let l = self.forward(&mut g, &p, x);
            out.extend_from_slice(g.value(l).data());
        }
        Ok(Tensor::from_vec(&[images.len(), self.num_classes], out))
    }

    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let l = self.logits(images)?;
        Ok((0..images.len())
            .map(|i| {
                let row = l.row(i);
                (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect())
    }

    pub fn accuracy(&self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(images)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / images.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub arm: Arm,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub per_class_acc: BTreeMap<String, f64>,
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_synthetic: usize,
    pub test_digest: String,
    pub failed: bool,
    pub note: String,
    pub config: ClassifierConfig,
}

/// Stratified split of `items` (by class) into `(train, val)`.
fn stratified_split(
    items: &[SampleRef],
    classes: usize,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<SampleRef>, Vec<SampleRef>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..classes {
        let mut members: Vec<SampleRef> = items.iter().filter(|r| r.class_id == c).cloned().collect();
        members.shuffle(rng);
        let n_val = (members.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    (train, val)
}

fn gather(bank: &ImageBank, refs: &[SampleRef]) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut imgs = Vec::with_capacity(refs.len());
    let mut labels = Vec::with_capacity(refs.len());
    for r in refs {
        imgs.push(bank.get(r)?.clone());
        labels.push(r.class_id);
    }
    Ok((imgs, labels))
}

pub struct FittedClassifier {
    pub model: Classifier,
    pub val_acc: f64,
    pub best_epoch: usize,
    pub failed: bool,
}

/// Adam training for `config.epochs`, keeping the epoch with the best
/// validation accuracy (training accuracy if there is no validation set).
/// A non-finite loss stops training and sets `failed`.
pub fn fit_classifier(
    num_classes: usize,
    config: &ClassifierConfig,
    train_x: &[Tensor],
    train_y: &[usize],
    val_x: &[Tensor],
    val_y: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<FittedClassifier> {
    if train_x.is_empty() {
        return Err(Error::Precondition("empty training split".into()));
    }
    let c = num_classes;
    let mut model = Classifier::new(c, config.width, config.seed ^ 0xC1A5);
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &model.params,
    );
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best: Option<(f64, usize, Classifier)> = None;
    let mut failed = false;
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<Tensor> = batch.iter().map(|&i| train_x[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let x = g.constant(Tensor::stack(&xs));
            let logits = model.forward(&mut g, &p, x);
            let loss = g.softmax_xent(logits, &ys);
            let grads = model.params.collect_grads(&g.backward(loss), &p);
            if !g.value(loss).item().is_finite() || !grads.iter().all(Tensor::is_finite) {
                failed = true;
                break 'epochs;
            }
            opt.update(&mut model.params, &grads);
        }
        let val_acc = if val_x.is_empty() {
            model.accuracy(train_x, train_y)?
        } else {
            model.accuracy(val_x, val_y)?
        };
        if best.as_ref().is_none_or(|(b, _, _)| val_acc >= *b) {
            best = Some((val_acc, epoch + 1, model.clone()));
        }
    }
    let (val_acc, best_epoch, model) = best.unwrap_or((0.0, 0, model));
    Ok(FittedClassifier {
        model,
        val_acc,
        best_epoch,
        failed,
    })
}

/// Trains an oracle on every record of `manifest`, holding out
/// `heldout_fraction` per class for calibration.
pub fn train_oracle(
    manifest: &DatasetManifest,
    config: &ClassifierConfig,
    heldout_fraction: f64,
) -> Result<CalibratedOracle> {
    config.validate()?;
    let mut bank = ImageBank::new(config.input_size);
    let store = ImageStore::load(manifest)?;
    let refs: Vec<SampleRef> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            bank.insert(false, &r.id, store.get(i));
            SampleRef {
                id: r.id.clone(),
                class_id: r.class_id,
                source: if r.source == Source::Synthetic { Source::Lr } else { r.source },
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = manifest.num_classes();
    let (rest, heldout) = stratified_split(&refs, c, heldout_fraction, &mut rng);
    let (train, val) = stratified_split(&rest, c, config.val_fraction, &mut rng);
    let (train_x, train_y) = gather(&bank, &train)?;
    let (val_x, val_y) = gather(&bank, &val)?;
    let (held_x, held_y) = gather(&bank, &heldout)?;
    let fit = fit_classifier(c, config, &train_x, &train_y, &val_x, &val_y, &mut rng)?;
    CalibratedOracle::new(fit.model, config.input_size, &held_x, &held_y)
}

/// Trains a classifier on the arm and reports test accuracy at the epoch
/// with the best validation accuracy.
pub fn train_classifier(
    setup: &ExperimentSetup,
    bank: &ImageBank,
    config: &ClassifierConfig,
) -> Result<(AccuracyReport, Classifier)> {
    config.validate()?;
    if bank.input_size() != config.input_size {
        return Err(Error::Config("image bank size differs from classifier input_size".into()));
    }
    let c = setup.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (_, val_refs) = stratified_split(&setup.shared_block, c, config.val_fraction, &mut rng);
    let held: HashSet<&str> = val_refs.iter().map(|r| r.id.as_str()).collect();
    let train_refs: Vec<SampleRef> = setup
        .train_records
        .iter()
        .filter(|r| r.source == Source::Synthetic || !held.contains(r.id.as_str()))
        .cloned()
        .collect();
    let (train_x, mut train_y) = gather(bank, &train_refs)?;
    let (val_x, mut val_y) = gather(bank, &val_refs)?;
    let (test_x, test_y) = gather(bank, &setup.test_records)?;
    if config.shuffle_labels {
        // Validation labels too, or epoch selection leaks the true labels.
        train_y.shuffle(&mut rng);
        val_y.shuffle(&mut rng);
    }

    let fit = fit_classifier(c, config, &train_x, &train_y, &val_x, &val_y, &mut rng)?;
    let (val_acc, best_epoch, chosen, failed) = (fit.val_acc, fit.best_epoch, fit.model, fit.failed);
    let pred = chosen.predict(&test_x)?;
    let mut per_class = BTreeMap::new();
    for (ci, name) in setup.classes.iter().enumerate() {
        let idx: Vec<usize> = (0..test_y.len()).filter(|&i| test_y[i] == ci).collect();
        if !idx.is_empty() {
            let hit = idx.iter().filter(|&&i| pred[i] == ci).count();
            per_class.insert(name.clone(), hit as f64 / idx.len() as f64);
        }
    }
    let test_acc = if test_y.is_empty() {
        0.0
    } else {
        pred.iter().zip(&test_y).filter(|(a, b)| a == b).count() as f64 / test_y.len() as f64
    };
    let report = AccuracyReport {
        arm: setup.arm,
        train_acc: chosen.accuracy(&train_x, &train_y)?,
        val_acc,
        test_acc,
        per_class_acc: per_class,
        best_epoch,
        n_train: train_x.len(),
        n_val: val_x.len(),
        n_test: test_x.len(),
        n_synthetic: setup.synthetic_count(),
        test_digest: setup.test_digest(),
        failed,
        note: "validation is a real-only slice of the block shared by all arms, disjoint from training and test".into(),
        config: config.clone(),
    };
    Ok((report, chosen))
}

/// CSV table `arm,test_acc,<class>...`.
pub fn comparison_csv(reports: &[AccuracyReport]) -> String {
    let mut classes: Vec<&String> = reports.iter().flat_map(|r| r.per_class_acc.keys()).collect();
    classes.sort();
    classes.dedup();
    let mut out = String::from("arm,test_acc");
    for c in &classes {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{:.6}", r.arm.label(), r.test_acc));
        for c in &classes {
            match r.per_class_acc.get(*c) {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Something that can render samples for a requested class.
pub trait ClassSampler {
    fn num_classes(&self) -> usize;
    fn sample_class(&self, class_id: usize, n: usize, seed: u64) -> Result<Vec<Tensor>>;
}

/// One conditional generator; the class goes in as the label.
pub struct Conditional<'a>(pub &'a Generator);

/// One single-class generator per class.
pub struct PerClass<'a>(pub Vec<&'a Generator>);

fn global_batch(gen: &Generator, label: usize, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[n, gen.config.z_dim], 1.0, &mut rng);
    let s = gen.config.out_size;
    let imgs = gen.render(&z, &vec![label; n], &vec![gen.global_spec(); n])?;
    Ok((0..n).map(|i| Tensor::from_vec(&[3, s, s], imgs.row(i).to_vec())).collect())
}

impl ClassSampler for Conditional<'_> {
    fn num_classes(&self) -> usize {
        self.0.config.num_classes
    }

    fn sample_class(&self, class_id: usize, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        global_batch(self.0, class_id, n, seed)
    }
}

impl ClassSampler for PerClass<'_> {
    fn num_classes(&self) -> usize {
        self.0.len()
    }

    fn sample_class(&self, class_id: usize, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        let gen = self
            .0
            .get(class_id)
            .ok_or_else(|| Error::Precondition(format!("no generator for class {class_id}")))?;
        global_batch(gen, 0, n, seed)
    }
}

/// A classifier whose held-out accuracy has been measured at >= 0.95.
pub struct CalibratedOracle {
    classifier: Classifier,
    input_size: usize,
    pub heldout_accuracy: f64,
}

pub const ORACLE_MIN_ACCURACY: f64 = 0.95;

impl CalibratedOracle {
    pub fn new(classifier: Classifier, input_size: usize, heldout: &[Tensor], labels: &[usize]) -> Result<Self> {
        let acc = classifier.accuracy(heldout, labels)?;
        if heldout.is_empty() || acc < ORACLE_MIN_ACCURACY {
            return Err(Error::Precondition(format!(
                "oracle held-out accuracy {acc:.3} is below {ORACLE_MIN_ACCURACY}"
            )));
        }
        Ok(Self {
            classifier,
            input_size,
            heldout_accuracy: acc,
        })
    }

    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let s = self.input_size;
        let resized: Vec<Tensor> = images
            .iter()
            .map(|img| {
                if img.dim(1) == s && img.dim(2) == s {
                    img.clone()
                } else {
                    resample_float(img, s, s)
                }
            })
            .collect();
        self.classifier.predict(&resized)
    }
}

/// Per-class fraction of `n` samples that the oracle assigns to the
/// requested class.
pub fn entanglement_probe(
    sampler: &dyn ClassSampler,
    classes: &[String],
    oracle: &CalibratedOracle,
    n: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if n == 0 {
        return Ok(out);
    }
    if classes.len() != sampler.num_classes() {
        return Err(Error::Precondition("class list does not match the sampler".into()));
    }
    for (c, name) in classes.iter().enumerate() {
        let imgs = sampler.sample_class(c, n, seed.wrapping_add(c as u64))?;
        let pred = oracle.predict(&imgs)?;
        out.insert(name.clone(), pred.iter().filter(|&&p| p == c).count() as f64 / n as f64);
    }
    Ok(out)
}
