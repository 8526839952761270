use std::path::{Path, PathBuf};

use super::io::{read_mask, write_image, write_mask};
use super::manifest::{Dataset, DatasetManifest, ManifestEntry, Sample};
use super::{FoldSpec, Phase};
use crate::error::{Error, Result};
use crate::labels::{derive_binary_mask, LabelMap, BACKGROUND};

/// Rewrites one mask through the fold's merge map. During meta-training the
/// novel classes are folded into background.
pub fn tailor_mask(mask: &LabelMap, fold: &FoldSpec, phase: Phase, file: &str) -> Result<LabelMap> {
    let mut lut: [Option<u8>; 256] = [None; 256];
    for &(raw, merged) in &fold.merge_map {
        let out = if phase == Phase::MetaTrain && fold.novel_classes.contains(&merged) {
            BACKGROUND
        } else {
            merged
        };
        lut[raw as usize] = Some(out);
    }
    let data = mask
        .data()
        .iter()
        .map(|&l| {
            lut[l as usize].ok_or_else(|| Error::UnknownLabel {
                label: l,
                file: file.to_string(),
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(mask.height(), mask.width(), data)
}

fn merged_names(fold: &FoldSpec, source: &[String]) -> Result<Vec<String>> {
    if !fold.class_names.is_empty() {
        return Ok(fold.class_names.clone());
    }
    let max = fold.human_classes().into_iter().next_back().unwrap_or(0) as usize;
    if max >= source.len() {
        return Err(Error::Config(format!(
            "fold uses merged id {max} but gives no class names and the source declares {}",
            source.len()
        )));
    }
    Ok(source.to_vec())
}

/// In-memory tailoring: keeps the samples of `phase` and rewrites their masks.
pub fn tailor_samples(dataset: &Dataset, fold: &FoldSpec, phase: Phase) -> Result<Dataset> {
    fold.validate()?;
    let samples = dataset
        .samples
        .iter()
        .filter(|s| phase.contains(s.split))
        .map(|s| {
            // the person mask is taken before novel parts turn into background
            Ok(Sample {
                mask: tailor_mask(&s.mask, fold, phase, &s.id)?,
                human: Some(s.human_mask()),
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_names: merged_names(fold, &dataset.class_names)?,
        samples,
    })
}

/// Writes the tailored `phase` subset of `manifest` below `out_dir` (images
/// are copied, masks rewritten) and returns the new manifest, saved as
/// `out_dir/manifest.toml`.
pub fn tailor_dataset(
    manifest: &DatasetManifest,
    fold: &FoldSpec,
    phase: Phase,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    fold.validate()?;
    manifest.validate()?;
    let class_names = merged_names(fold, &manifest.class_names)?;
    let mut entries = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if !phase.contains(e.split) {
            continue;
        }
        let src_mask = manifest.resolve(&e.mask);
        let mask = read_mask(&src_mask)?;
        let tailored = tailor_mask(&mask, fold, phase, &src_mask.display().to_string())?;
        let human = match &e.human {
            Some(rel) => derive_binary_mask(&read_mask(&manifest.resolve(rel))?),
            None => derive_binary_mask(&mask),
        };
        let stem = format!("{i:06}.png");
        let image_rel = PathBuf::from("images").join(&stem);
        let mask_rel = PathBuf::from("masks").join(&stem);
        let human_rel = PathBuf::from("humans").join(&stem);
        let image = super::io::read_image(&manifest.resolve(&e.image))?;
        write_image(&out_dir.join(&image_rel), &image)?;
        write_mask(&out_dir.join(&mask_rel), &tailored)?;
        write_mask(&out_dir.join(&human_rel), &human)?;
        entries.push(ManifestEntry {
            image: image_rel,
            mask: mask_rel,
            human: Some(human_rel),
            split: e.split,
        });
    }
    let out = DatasetManifest::new(class_names, entries, out_dir);
    out.save(&out_dir.join("manifest.toml"))?;
    Ok(out)
}
