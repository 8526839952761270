use rand::Rng;

use super::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, BACKGROUND};
use crate::tensor::{resize_bilinear, Tensor};

/// One geometric transform, applied identically to an image and its mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    /// Size after rescaling.
    pub scaled: (usize, usize),
    /// Top-left corner of the crop in the (padded) rescaled image.
    pub offset: (usize, usize),
    pub flip: bool,
}

impl Transform {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            scaled: (h, w),
            offset: (0, 0),
            flip: false,
        }
    }

    /// Draws a random transform producing an `output`-sized pair. The scale is
    /// relative to `output`.
    pub fn draw(config: &AugmentConfig, output: (usize, usize), rng: &mut impl Rng) -> Self {
        if !config.enabled {
            return Self {
                scaled: output,
                offset: (0, 0),
                flip: false,
            };
        }
        let (lo, hi) = config.scale_range;
        let s = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let (sh, sw) = if config.crop {
            (
                ((output.0 as f64 * s).round() as usize).max(1),
                ((output.1 as f64 * s).round() as usize).max(1),
            )
        } else {
            output
        };
        let offset = if config.crop {
            let (ph, pw) = (sh.max(output.0), sw.max(output.1));
            (rng.random_range(0..=ph - output.0), rng.random_range(0..=pw - output.1))
        } else {
            (0, 0)
        };
        let flip = config.flip && rng.random_bool(0.5);
        Self {
            scaled: (sh, sw),
            offset,
            flip,
        }
    }
}

/// Applies `t` and crops to `output`. Regions outside the rescaled image are
/// zero in the image and background in the mask.
pub fn apply_transform(
    image: &Tensor,
    mask: &LabelMap,
    t: &Transform,
    output: (usize, usize),
) -> Result<(Tensor, LabelMap)> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape("augment", "image and mask differ in size"));
    }
    let (sh, sw) = t.scaled;
    let img = resize_bilinear(image, sh, sw);
    let msk = if (sh, sw) == (mask.height(), mask.width()) {
        mask.clone()
    } else {
        mask.resize_nearest(sh, sw)
    };
    let (oh, ow) = output;
    let (oy, ox) = t.offset;
    let mut out_img = Tensor::zeros(image.channels(), oh, ow);
    let mut out_mask = LabelMap::filled(oh, ow, BACKGROUND);
    for y in 0..oh {
        let sy = y + oy;
        if sy >= sh {
            continue;
        }
        for x in 0..ow {
            let sx = x + ox;
            if sx >= sw {
                continue;
            }
            let dx = if t.flip { ow - 1 - x } else { x };
            for c in 0..image.channels() {
                out_img.set(c, y, dx, img.at(c, sy, sx));
            }
            out_mask.set(y, dx, msk.get(sy, sx));
        }
    }
    Ok((out_img, out_mask))
}

/// Random scale, crop and flip of an image/mask pair, producing `output`-sized results.
pub fn augment(
    image: &Tensor,
    mask: &LabelMap,
    config: &AugmentConfig,
    output: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Tensor, LabelMap)> {
    let t = Transform::draw(config, output, rng);
    apply_transform(image, mask, &t, output)
}
