use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{ensure_parent, read_image, read_mask};
use super::Split;
use crate::error::{Error, Result};
use crate::labels::{derive_binary_mask, LabelMap, BACKGROUND};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's directory.
    pub image: PathBuf,
    /// Label image path, relative to the manifest's directory.
    pub mask: PathBuf,
    /// Optional binary person mask (nonzero is person). Without it the
    /// person mask is derived from `mask`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human: Option<PathBuf>,
    pub split: Split,
}

/// Declarative description of an on-disk dataset.
///
/// ```toml
/// class_names = ["background", "head", "torso"]
/// background_id = 0
///
/// [[entries]]
/// image = "images/000000.png"
/// mask = "masks/000000.png"
/// split = "meta_train_support"
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub background_id: u8,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        Self {
            class_names,
            background_id: BACKGROUND,
            entries,
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        ensure_parent(path)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Structural checks that need no image decoding.
    pub fn validate(&self) -> Result<()> {
        if self.background_id != BACKGROUND {
            return Err(Error::Manifest(format!(
                "background_id must be 0, found {}",
                self.background_id
            )));
        }
        match self.class_names.first() {
            Some(n) if n == "background" => {}
            _ => return Err(Error::Manifest("label id 0 must be named \"background\"".into())),
        }
        if self.class_names.len() > 256 {
            return Err(Error::Manifest("at most 256 classes fit an 8-bit label image".into()));
        }
        let mut seen: HashMap<&Path, Split> = HashMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.image, e.split) {
                return Err(Error::Manifest(format!(
                    "{} listed in both {prev} and {}",
                    e.image.display(),
                    e.split
                )));
            }
        }
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable identifier, the image path as listed in the manifest.
    pub id: String,
    pub image: Tensor,
    pub mask: LabelMap,
    /// Whole-person foreground, including parts `mask` may hide as
    /// background. `None` derives it from `mask`.
    pub human: Option<LabelMap>,
    pub split: Split,
}

impl Sample {
    /// Binary person mask: 1 on the person, 0 elsewhere.
    pub fn human_mask(&self) -> LabelMap {
        match &self.human {
            Some(h) => derive_binary_mask(h),
            None => derive_binary_mask(&self.mask),
        }
    }
}

/// A fully decoded dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Decodes every entry and checks that each mask only uses declared ids.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let n = manifest.class_names.len();
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let image = read_image(&manifest.resolve(&e.image))?;
                let mask_path = manifest.resolve(&e.mask);
                let mask = read_mask(&mask_path)?;
                if (mask.height(), mask.width()) != (image.height(), image.width()) {
                    return Err(Error::Manifest(format!(
                        "{} and its mask differ in size",
                        e.image.display()
                    )));
                }
                if let Some(&bad) = mask.data().iter().find(|&&l| l as usize >= n) {
                    return Err(Error::Manifest(format!(
                        "{} uses label {bad} but only {n} classes are declared",
                        mask_path.display()
                    )));
                }
                let human = match &e.human {
                    Some(rel) => {
                        let h = read_mask(&manifest.resolve(rel))?;
                        if !h.same_shape(&mask) {
                            return Err(Error::Manifest(format!(
                                "{} and its person mask differ in size",
                                e.image.display()
                            )));
                        }
                        Some(h)
                    }
                    None => None,
                };
                Ok(Sample {
                    id: e.image.to_string_lossy().into_owned(),
                    image,
                    mask,
                    human,
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_names: manifest.class_names.clone(),
            samples,
        })
    }

    /// Indices of the samples in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_name(&self, id: u8) -> &str {
        self.class_names
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("?")
    }
}
