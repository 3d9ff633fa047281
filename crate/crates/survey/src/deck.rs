//! Image pools and deck assembly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SurveyError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolImage {
    pub image_id: String,
    pub class: String,
    pub is_synthetic: bool,
    /// File backing the image; absent for in-memory pools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePool {
    pub images: Vec<PoolImage>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "webp"];

impl ImagePool {
    /// Reads `root/synthetic/<class>/*` and `root/real/<class>/*`.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let mut images = Vec::new();
        for (kind, is_synthetic) in [("synthetic", true), ("real", false)] {
            let dir = root.join(kind);
            if !dir.is_dir() {
                continue;
            }
            for class_dir in sorted_entries(&dir)? {
                if !class_dir.is_dir() {
                    continue;
                }
                let class = file_name(&class_dir);
                for file in sorted_entries(&class_dir)? {
                    let is_image = file
                        .extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
                    if file.is_file() && is_image {
                        images.push(PoolImage {
                            image_id: format!("{kind}/{class}/{}", file_name(&file)),
                            class: class.clone(),
                            is_synthetic,
                            path: Some(file),
                        });
                    }
                }
            }
        }
        Ok(Self { images })
    }

    pub fn get(&self, image_id: &str) -> Option<&PoolImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SurveyError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassQuota {
    pub class: String,
    pub synthetic: usize,
    pub real: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeckConfig {
    pub quotas: Vec<ClassQuota>,
    pub time_limit_ms: u64,
    /// Slack on top of the limit before a response is flagged.
    pub tolerance_ms: u64,
}

impl DeckConfig {
    /// 88 items: 17 synthetic per class, 12/12/13 real.
    pub fn standard() -> Self {
        let q = |class: &str, real| ClassQuota {
            class: class.into(),
            synthetic: 17,
            real,
        };
        Self {
            quotas: vec![q("hamburger", 12), q("pizza", 12), q("spring_rolls", 13)],
            time_limit_ms: 3000,
            tolerance_ms: 500,
        }
    }

    pub fn total(&self) -> usize {
        self.quotas.iter().map(|q| q.synthetic + q.real).sum()
    }

    pub fn synthetic_total(&self) -> usize {
        self.quotas.iter().map(|q| q.synthetic).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeckItem {
    /// Opaque id shown to clients.
    pub item_id: String,
    pub image_id: String,
    pub class: String,
    pub is_synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub synthetic: usize,
    pub real: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyDeck {
    pub items: Vec<DeckItem>,
    pub composition: BTreeMap<String, Composition>,
    pub seed: u64,
}

impl SurveyDeck {
    pub fn synthetic_count(&self) -> usize {
        self.items.iter().filter(|i| i.is_synthetic).count()
    }

    pub fn item(&self, item_id: &str) -> Option<&DeckItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }
}

/// Opaque item id: nothing about class or origin can be read from it.
pub fn opaque_id(salt: &str, image_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0]);
    h.update(image_id.as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Picks the first images of each class/kind in id order, then shuffles
/// the whole deck with `seed`. Every session thus sees the same multiset.
pub fn build_deck(pool: &ImagePool, config: &DeckConfig, salt: &str, seed: u64) -> Result<SurveyDeck> {
    let mut items = Vec::with_capacity(config.total());
    let mut composition = BTreeMap::new();
    let mut deficits = Vec::new();
    for q in &config.quotas {
        for (is_synthetic, need) in [(true, q.synthetic), (false, q.real)] {
            let mut candidates: Vec<&PoolImage> = pool
                .images
                .iter()
                .filter(|i| i.class == q.class && i.is_synthetic == is_synthetic)
                .collect();
            candidates.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            if candidates.len() < need {
                let kind = if is_synthetic { "synthetic" } else { "real" };
                deficits.push(format!(
                    "class `{}` {kind}: need {need}, have {}",
                    q.class,
                    candidates.len()
                ));
                continue;
            }
            items.extend(candidates[..need].iter().map(|i| DeckItem {
                item_id: opaque_id(salt, &i.image_id),
                image_id: i.image_id.clone(),
                class: i.class.clone(),
                is_synthetic,
            }));
        }
        composition.insert(
            q.class.clone(),
            Composition {
                synthetic: q.synthetic,
                real: q.real,
            },
        );
    }
    if !deficits.is_empty() {
        return Err(SurveyError::PoolDeficit(deficits.join("; ")));
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SurveyDeck {
        items,
        composition,
        seed,
    })
}
