//! Integer label images. Id 0 is always background.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "LabelMap::new",
                format!("{} labels for {height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Sorted distinct labels.
    pub fn unique(&self) -> BTreeSet<u8> {
        self.data.iter().copied().collect()
    }

    pub fn contains(&self, label: u8) -> bool {
        self.data.contains(&label)
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&l| f(l)).collect(),
        }
    }

    /// Pixel mask of `label`.
    pub fn indicator(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == label).collect()
    }

    /// Nearest-neighbour resampling; labels are never interpolated.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> LabelMap {
        let src = |o: usize, n_out: usize, n_in: usize| {
            (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        let xs: Vec<usize> = (0..out_w).map(|x| src(x, out_w, self.width)).collect();
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = src(y, out_h, self.height);
            data.extend(xs.iter().map(|&sx| self.get(sy, sx)));
        }
        LabelMap {
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }
}

/// Human-foreground mask: 1 wherever the label is not background.
pub fn derive_binary_mask(mask: &LabelMap) -> LabelMap {
    mask.map(|l| u8::from(l != BACKGROUND))
}
