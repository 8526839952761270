use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads an RGB image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Reads a single-channel 8-bit label image.
pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Manifest(format!(
                "{} is not a single-channel 8-bit label image ({:?})",
                path.display(),
                other.color()
            )))
        }
    };
    LabelMap::new(gray.height() as usize, gray.width() as usize, gray.into_raw())
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.shape();
    if c != 3 {
        return Err(Error::shape("write_image", format!("{c} channels")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = image.at(ch, y as usize, x as usize).clamp(0.0, 1.0);
            px[ch] = (v * 255.0).round() as u8;
        }
    }
    ensure_parent(path)?;
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("label map buffer matches its size");
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}
