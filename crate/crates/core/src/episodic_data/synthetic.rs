//! Procedural stick figures with pixel-exact part masks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_image, write_mask};
use super::manifest::{Dataset, DatasetManifest, ManifestEntry, Sample};
use super::Split;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, BACKGROUND};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Head,
    Torso,
    Arms,
    Legs,
    Hat,
    Skirt,
}

impl PartKind {
    pub const ALL: [PartKind; 6] = [
        PartKind::Head,
        PartKind::Torso,
        PartKind::Arms,
        PartKind::Legs,
        PartKind::Hat,
        PartKind::Skirt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartKind::Head => "head",
            PartKind::Torso => "torso",
            PartKind::Arms => "arms",
            PartKind::Legs => "legs",
            PartKind::Hat => "hat",
            PartKind::Skirt => "skirt",
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            PartKind::Head => [0.95, 0.78, 0.62],
            PartKind::Torso => [0.18, 0.38, 0.85],
            PartKind::Arms => [0.92, 0.55, 0.15],
            PartKind::Legs => [0.22, 0.22, 0.28],
            PartKind::Hat => [0.88, 0.12, 0.15],
            PartKind::Skirt => [0.62, 0.22, 0.72],
        }
    }

    /// Painting order, back to front.
    fn depth(self) -> u8 {
        match self {
            PartKind::Legs => 0,
            PartKind::Torso => 1,
            PartKind::Skirt => 2,
            PartKind::Arms => 3,
            PartKind::Head => 4,
            PartKind::Hat => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub parts: Vec<PartKind>,
    /// Emit left and right arms/legs as separate classes.
    pub split_symmetric: bool,
    pub meta_train_support: usize,
    pub meta_train_query: usize,
    pub meta_test_support: usize,
    pub meta_test_query: usize,
    /// Probability that an optional part (hat, skirt) is worn.
    pub optional_part_prob: f64,
    pub color_jitter: f64,
    pub pixel_noise: f64,
    pub clutter: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            parts: PartKind::ALL.to_vec(),
            split_symmetric: false,
            meta_train_support: 40,
            meta_train_query: 40,
            meta_test_support: 20,
            meta_test_query: 20,
            optional_part_prob: 0.5,
            color_jitter: 0.08,
            pixel_noise: 0.05,
            clutter: 4,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 32 pixels, got {}",
                self.image_size
            )));
        }
        let mut seen = Vec::new();
        for p in &self.parts {
            if seen.contains(p) {
                return Err(Error::Config(format!("part {} listed twice", p.name())));
            }
            seen.push(*p);
        }
        if self.parts.len() < 4 {
            return Err(Error::Config(format!(
                "at least 4 part classes are needed, got {}",
                self.parts.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.optional_part_prob) {
            return Err(Error::Config("optional_part_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `background` followed by one name per emitted class.
    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        for &p in &self.parts {
            if self.split_symmetric && matches!(p, PartKind::Arms | PartKind::Legs) {
                let stem = &p.name()[..p.name().len() - 1];
                names.push(format!("left_{stem}"));
                names.push(format!("right_{stem}"));
            } else {
                names.push(p.name().to_string());
            }
        }
        names
    }

    /// Label of `part` (side 0 is left); `None` when the part is not rendered.
    fn label_of(&self, part: PartKind, side: usize) -> Option<u8> {
        let mut next = 1u8;
        for &p in &self.parts {
            let paired = self.split_symmetric && matches!(p, PartKind::Arms | PartKind::Legs);
            if p == part {
                return Some(if paired { next + side as u8 } else { next });
            }
            next += if paired { 2 } else { 1 };
        }
        None
    }

    fn split_counts(&self) -> [(Split, usize); 4] {
        [
            (Split::MetaTrainSupport, self.meta_train_support),
            (Split::MetaTrainQuery, self.meta_train_query),
            (Split::MetaTestSupport, self.meta_test_support),
            (Split::MetaTestQuery, self.meta_test_query),
        ]
    }
}

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Segment { ax: f64, ay: f64, bx: f64, by: f64, r: f64 },
    /// Trapezoid centred on `cx` whose half-width grows linearly from top to bottom.
    Trapezoid { cx: f64, y0: f64, y1: f64, top: f64, bottom: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Segment { ax, ay, bx, by, r } => {
                let (dx, dy) = (bx - ax, by - ay);
                let t = (((x - ax) * dx + (y - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                (x - ax - t * dx).powi(2) + (y - ay - t * dy).powi(2) <= r * r
            }
            Shape::Trapezoid { cx, y0, y1, top, bottom } => {
                if y < y0 || y > y1 {
                    return false;
                }
                let half = top + (bottom - top) * (y - y0) / (y1 - y0);
                (x - cx).abs() <= half
            }
        }
    }
}

struct Layer {
    shape: Shape,
    label: u8,
    color: [f64; 3],
    depth: u8,
}

fn jittered(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one figure. Pixel values are quantized to 8 bits so that the
/// in-memory sample equals its PNG round trip.
fn render(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Tensor, LabelMap) {
    let n = config.image_size;
    let size = n as f64;

    let bg_base = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let freq = rng.random_range(0.1..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut clutter = Vec::new();
    for _ in 0..config.clutter {
        let (x0, y0) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let (w, h) = (rng.random_range(0.05..0.25) * size, rng.random_range(0.05..0.25) * size);
        let gray = rng.random_range(0.15..0.85);
        let tint = jittered(rng, [gray; 3], 0.1);
        clutter.push((Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }, tint));
    }

    let u = rng.random_range(0.7..0.95) * size;
    let cx = rng.random_range(0.38..0.62) * size;
    let top = (size - u) / 2.0 + rng.random_range(-0.04..0.04) * size;
    let y = |f: f64| top + f * u;

    let mut layers = Vec::new();
    let mut push = |part: PartKind, side: usize, shape: Shape, color: [f64; 3]| {
        if let Some(label) = config.label_of(part, side) {
            layers.push(Layer {
                shape,
                label,
                color,
                depth: part.depth(),
            });
        }
    };
    let j = config.color_jitter;

    let c = jittered(rng, PartKind::Head.base_color(), j);
    push(PartKind::Head, 0, Shape::Disk { cx, cy: y(0.14), r: 0.095 * u }, c);

    let c = jittered(rng, PartKind::Torso.base_color(), j);
    let tw = rng.random_range(0.11..0.15) * u;
    push(PartKind::Torso, 0, Shape::Rect { x0: cx - tw, y0: y(0.24), x1: cx + tw, y1: y(0.56) }, c);

    let c = jittered(rng, PartKind::Arms.base_color(), j);
    for side in 0..2 {
        let s = if side == 0 { -1.0 } else { 1.0 };
        let angle = rng.random_range(-0.3..1.1f64);
        let len = rng.random_range(0.28..0.36) * u;
        let (ax, ay) = (cx + s * (tw + 0.04 * u), y(0.27));
        let (bx, by) = (ax + s * angle.sin() * len, ay + angle.cos() * len);
        push(PartKind::Arms, side, Shape::Segment { ax, ay, bx, by, r: 0.05 * u }, c);
    }

    let c = jittered(rng, PartKind::Legs.base_color(), j);
    for side in 0..2 {
        let s = if side == 0 { -1.0 } else { 1.0 };
        let angle = rng.random_range(0.0..0.3f64);
        let len = rng.random_range(0.38..0.44) * u;
        let (ax, ay) = (cx + s * 0.065 * u, y(0.55));
        let (bx, by) = (ax + s * angle.sin() * len, ay + angle.cos() * len);
        push(PartKind::Legs, side, Shape::Segment { ax, ay, bx, by, r: 0.055 * u }, c);
    }

    if rng.random_bool(config.optional_part_prob) {
        let c = jittered(rng, PartKind::Hat.base_color(), j);
        let hw = rng.random_range(0.09..0.14) * u;
        push(PartKind::Hat, 0, Shape::Rect { x0: cx - hw, y0: y(0.0), x1: cx + hw, y1: y(0.09) }, c);
    }
    if rng.random_bool(config.optional_part_prob) {
        let c = jittered(rng, PartKind::Skirt.base_color(), j);
        let bottom = rng.random_range(0.18..0.26) * u;
        let shape = Shape::Trapezoid { cx, y0: y(0.5), y1: y(rng.random_range(0.7..0.8)), top: tw, bottom };
        push(PartKind::Skirt, 0, shape, c);
    }
    layers.sort_by_key(|l| l.depth);

    let mut image = Tensor::zeros(3, n, n);
    let mut mask = LabelMap::filled(n, n, BACKGROUND);
    let noise = config.pixel_noise;
    for py in 0..n {
        for px in 0..n {
            let (x, yy) = (px as f64 + 0.5, py as f64 + 0.5);
            let stripe = 0.08 * (freq * (x + 0.5 * yy) + phase).sin();
            let mut color = bg_base.map(|v| v + stripe);
            for (shape, tint) in &clutter {
                if shape.contains(x, yy) {
                    color = *tint;
                }
            }
            for l in &layers {
                if l.shape.contains(x, yy) {
                    color = l.color;
                    mask.set(py, px, l.label);
                }
            }
            for (ch, v) in color.iter().enumerate() {
                let jitter = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                image.set(ch, py, px, quantize(v + jitter));
            }
        }
    }
    (image, mask)
}

/// Generates the four splits in memory; a pure function of `(config, seed)`.
pub fn generate_synthetic_samples(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (split, count) in config.split_counts() {
        for k in 0..count {
            let (image, mask) = render(config, &mut rng);
            samples.push(Sample {
                id: format!("{split}_{k:04}"),
                image,
                mask,
                human: None,
                split,
            });
        }
    }
    Ok(Dataset {
        class_names: config.class_names(),
        samples,
    })
}

/// Writes PNG images and masks below `out_dir` plus `out_dir/manifest.toml`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let dataset = generate_synthetic_samples(config, seed)?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
        write_image(&out_dir.join(&image), &s.image)?;
        write_mask(&out_dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry {
            image,
            mask,
            human: None,
            split: s.split,
        });
    }
    let manifest = DatasetManifest::new(dataset.class_names, entries, out_dir);
    manifest.save(&out_dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            image_size: 32,
            meta_train_support: 3,
            meta_train_query: 2,
            meta_test_support: 2,
            meta_test_query: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn masks_use_declared_ids_only() {
        let cfg = small();
        let ds = generate_synthetic_samples(&cfg, 3).unwrap();
        assert_eq!(ds.class_names.len(), 7);
        assert_eq!(ds.indices(Split::MetaTrainSupport).len(), 3);
        for s in &ds.samples {
            assert!(s.mask.data().iter().all(|&l| (l as usize) < ds.class_names.len()));
            assert!(s.mask.contains(1), "every figure has a head");
        }
    }

    #[test]
    fn symmetric_split_doubles_limbs() {
        let cfg = SyntheticConfig {
            split_symmetric: true,
            ..small()
        };
        let names = cfg.class_names();
        assert_eq!(
            names,
            ["background", "head", "torso", "left_arm", "right_arm", "left_leg", "right_leg", "hat", "skirt"]
        );
        let ds = generate_synthetic_samples(&cfg, 1).unwrap();
        assert!(ds.samples.iter().any(|s| s.mask.contains(3) && s.mask.contains(4)));
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic_samples(&small(), 11).unwrap();
        let b = generate_synthetic_samples(&small(), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_samples(&small(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig { image_size: 16, ..small() }.validate().is_err());
        let few = SyntheticConfig {
            parts: vec![PartKind::Head, PartKind::Torso, PartKind::Legs],
            ..small()
        };
        assert!(few.validate().is_err());
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let manifest = generate_synthetic_dataset(&cfg, 5, dir.path()).unwrap();
        let loaded = Dataset::load(&DatasetManifest::load(&dir.path().join("manifest.toml")).unwrap()).unwrap();
        let memory = generate_synthetic_samples(&cfg, 5).unwrap();
        assert_eq!(manifest.entries.len(), memory.samples.len());
        for (a, b) in loaded.samples.iter().zip(&memory.samples) {
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) < 1e-12);
        }
    }
}
