use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::ensure_parent;
use crate::error::{Error, Result};
use crate::labels::BACKGROUND;

/// Class merging plus the base/novel partition of one fold.
///
/// ```toml
/// name = "fold1"
/// merge_map = [[0, 0], [1, 1], [2, 2], [3, 3], [4, 3]]
/// base_classes = [1, 2]
/// novel_classes = [3]
/// class_names = ["background", "head", "torso", "arms"]
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    #[serde(default)]
    pub name: String,
    /// `(raw id, merged id)` pairs.
    pub merge_map: Vec<(u8, u8)>,
    pub base_classes: BTreeSet<u8>,
    pub novel_classes: BTreeSet<u8>,
    /// Names of the merged ids; empty keeps the source manifest's names.
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl FoldSpec {
    /// Fold over already-merged ids `0..num_classes`.
    pub fn identity(num_classes: usize, novel: impl IntoIterator<Item = u8>) -> Self {
        let novel_classes: BTreeSet<u8> = novel.into_iter().collect();
        let base_classes = (1..num_classes as u8).filter(|c| !novel_classes.contains(c)).collect();
        Self {
            name: String::new(),
            merge_map: (0..num_classes as u8).map(|c| (c, c)).collect(),
            base_classes,
            novel_classes,
            class_names: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fold: FoldSpec = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        fold.validate()?;
        Ok(fold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        ensure_parent(path)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `C_human = {0} ∪ C_base ∪ C_novel`.
    pub fn human_classes(&self) -> BTreeSet<u8> {
        let mut all: BTreeSet<u8> = [BACKGROUND].into();
        all.extend(&self.base_classes);
        all.extend(&self.novel_classes);
        all
    }

    pub fn merge_lookup(&self) -> BTreeMap<u8, u8> {
        self.merge_map.iter().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.base_classes.intersection(&self.novel_classes).next() {
            return Err(Error::Config(format!("class {c} is both base and novel")));
        }
        if self.base_classes.contains(&BACKGROUND) || self.novel_classes.contains(&BACKGROUND) {
            return Err(Error::Config("background cannot be a base or novel class".into()));
        }
        let mut raw = BTreeSet::new();
        for &(r, _) in &self.merge_map {
            if !raw.insert(r) {
                return Err(Error::Config(format!("raw label {r} mapped twice")));
            }
        }
        let human = self.human_classes();
        for &(r, m) in &self.merge_map {
            if !human.contains(&m) {
                return Err(Error::Config(format!(
                    "raw label {r} merges into {m}, which is neither background, base nor novel"
                )));
            }
        }
        if !self.class_names.is_empty() {
            if let Some(&max) = human.iter().next_back() {
                if max as usize >= self.class_names.len() {
                    return Err(Error::Config(format!(
                        "class {max} has no name ({} names given)",
                        self.class_names.len()
                    )));
                }
            }
        }
        Ok(())
    }
}
