//! Dataset manifests, deterministic resampling and the square-patch sampler.

mod patch;
mod resample;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use patch::{extract_patch, extract_patch_float, sample_patch, PatchSpec};
pub use resample::{
    from_model_domain, planes_to_rgb, quantize, resample_float, resample_image, resample_matrix,
    rgb_to_planes, to_model_domain, window_matrix,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum shorter side of an any-resolution (HR) source image.
pub const HR_MIN_SIDE: u32 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "HR")]
    Hr,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Lr => "LR",
            Source::Hr => "HR",
            Source::Synthetic => "SYNTHETIC",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the manifest's base directory.
    pub path: PathBuf,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub width: u32,
    pub height: u32,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    classes: Vec<String>,
    seed: u64,
    lr_size: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub seed: u64,
    pub lr_size: u32,
    /// Directory record paths are resolved against.
    pub base_dir: PathBuf,
}

/// One source directory under the dataset root. `subdir = "."` means class
/// folders sit directly under the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDir {
    pub subdir: PathBuf,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestOptions {
    pub lr_size: u32,
    pub hr_min_side: u32,
    pub seed: u64,
    pub layout: Vec<SourceDir>,
}

impl ManifestOptions {
    pub fn flat(lr_size: u32) -> Self {
        Self {
            lr_size,
            hr_min_side: HR_MIN_SIDE,
            seed: 0,
            layout: vec![SourceDir {
                subdir: ".".into(),
                source: Source::Lr,
            }],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestBuild {
    pub manifest: DatasetManifest,
    pub skipped_undecodable: usize,
    pub rejected_too_small: usize,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn slash_path(p: &Path) -> String {
    p.components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// Enumerates `root/<subdir>/<class>/*` for every configured source, in
/// lexicographic path order.
pub fn build_manifest(
    root: &Path,
    class_names: &[String],
    opts: &ManifestOptions,
) -> Result<ManifestBuild> {
    if class_names.is_empty() {
        return Err(Error::Config("no classes given".into()));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut rejected = 0;
    for (class_id, class) in class_names.iter().enumerate() {
        let mut class_records = 0;
        for layout in &opts.layout {
            let rel_dir = layout.subdir.join(class);
            let dir = root.join(&rel_dir);
            if !dir.is_dir() {
                return Err(Error::MissingClassDir {
                    class: class.clone(),
                    path: dir,
                });
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_file(p))
                .collect();
            files.sort();
            for file in files {
                let img = match image::open(&file) {
                    Ok(img) => img,
                    Err(e) => {
                        log::warn!("skipping undecodable image {}: {e}", file.display());
                        skipped += 1;
                        continue;
                    }
                };
                let (width, height) = (img.width(), img.height());
                let min_side = width.min(height);
                let too_small = match layout.source {
                    Source::Lr => min_side < opts.lr_size,
                    Source::Hr => min_side < opts.hr_min_side,
                    Source::Synthetic => false,
                };
                if too_small {
                    rejected += 1;
                    continue;
                }
                let rel = rel_dir.join(file.file_name().expect("file has a name"));
                records.push(ImageRecord {
                    id: slash_path(&rel),
                    path: rel,
                    class_id,
                    width,
                    height,
                    source: layout.source,
                });
                class_records += 1;
            }
        }
        if class_records == 0 {
            return Err(Error::EmptyClass(class.clone()));
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = DatasetManifest {
        classes: class_names.to_vec(),
        records,
        seed: opts.seed,
        lr_size: opts.lr_size,
        base_dir: root.to_path_buf(),
    };
    manifest.validate()?;
    Ok(ManifestBuild {
        manifest,
        skipped_undecodable: skipped,
        rejected_too_small: rejected,
    })
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(Error::Config(format!("duplicate record id {}", r.id)));
            }
            if r.class_id >= self.classes.len() {
                return Err(Error::Config(format!(
                    "record {} has class {} but only {} classes are declared",
                    r.id,
                    r.class_id,
                    self.classes.len()
                )));
            }
            if r.width == 0 || r.height == 0 {
                return Err(Error::Config(format!("record {} has zero size", r.id)));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    pub fn records_of(&self, source: Source) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.source == source)
    }

    /// Keeps only records from `source`; classes are unchanged.
    pub fn only_source(&self, source: Source) -> DatasetManifest {
        DatasetManifest {
            records: self.records_of(source).cloned().collect(),
            ..self.clone()
        }
    }

    /// Keeps only records of `class_id`, relabelled as class 0 of a
    /// single-class manifest.
    pub fn single_class(&self, class_id: usize) -> DatasetManifest {
        DatasetManifest {
            classes: vec![self.classes[class_id].clone()],
            records: self
                .records
                .iter()
                .filter(|r| r.class_id == class_id)
                .cloned()
                .map(|mut r| {
                    r.class_id = 0;
                    r
                })
                .collect(),
            seed: self.seed,
            lr_size: self.lr_size,
            base_dir: self.base_dir.clone(),
        }
    }

    /// Writes the JSON-lines form; record paths are rewritten relative to
    /// the manifest file's directory.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl_relative_to(path.parent().unwrap_or(Path::new(".")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn to_jsonl_relative_to(&self, dir: &Path) -> Result<String> {
        let mut out = BufWriter::new(Vec::new());
        let header = ManifestHeader {
            classes: self.classes.clone(),
            seed: self.seed,
            lr_size: self.lr_size,
        };
        let io = |e| Error::io(dir, e);
        writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
        for r in &self.records {
            let mut r = r.clone();
            r.path = relative_path(&self.base_dir.join(&r.path), dir);
            writeln!(out, "{}", serde_json::to_string(&r)?).map_err(io)?;
        }
        let bytes = out.into_inner().map_err(|e| Error::io(dir, e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("json is utf-8"))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Config(format!("empty manifest {}", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let manifest = DatasetManifest {
            classes: header.classes,
            records,
            seed: header.seed,
            lr_size: header.lr_size,
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<RgbImage> {
        let path = self.resolve(record);
        image::open(&path)
            .map(|i| i.to_rgb8())
            .map_err(|source| Error::Image { path, source })
    }
}

/// Lexical relative path from `dir` to `target`; absolute inputs are made
/// comparable through the current directory.
pub fn relative_path(target: &Path, dir: &Path) -> PathBuf {
    let abs = |p: &Path| -> Vec<String> {
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().unwrap_or_default().join(p)
        };
        let mut parts: Vec<String> = Vec::new();
        for c in p.components() {
            match c {
                Component::Normal(s) => parts.push(s.to_string_lossy().into_owned()),
                Component::ParentDir => {
                    parts.pop();
                }
                _ => {}
            }
        }
        parts
    };
    let (t, d) = (abs(target), abs(dir));
    let common = t.iter().zip(&d).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..d.len() {
        out.push("..");
    }
    for part in &t[common..] {
        out.push(part);
    }
    out
}

/// Decoded images for a manifest, indexed like `manifest.records`.
pub struct ImageStore {
    images: Vec<Tensor>,
}

impl ImageStore {
    /// Loads every record into the model's `[-1, 1]` domain. LR records are
    /// resampled to `lr_size x lr_size`; other sources keep native size.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let mut img = manifest.load_image(r)?;
            if r.source == Source::Lr && (img.width() != manifest.lr_size || img.height() != manifest.lr_size) {
                img = resample_image(&img, manifest.lr_size, manifest.lr_size);
            }
            images.push(to_model_domain(&img));
        }
        Ok(Self { images })
    }

    pub fn from_tensors(images: Vec<Tensor>) -> Self {
        Self { images }
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.images[idx]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
