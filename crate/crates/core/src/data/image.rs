//! Conversion between decoded images and normalized `[C, H, W]` tensors.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use octmorph_autograd::Tensor;

use super::manifest::{DatasetManifest, Record};
use crate::error::{Error, Result};

/// Maps an 8-bit value to `[-1, 1]`.
pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`to_unit`], rounding and clamping to the 8-bit range.
pub fn from_unit(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Resizes `img` to `resolution × resolution` (bilinear), coerces it to
/// `channels` (1 or 3) and maps it to `[-1, 1]`. Returns a `[C, R, R]` tensor.
pub fn normalize(img: &DynamicImage, resolution: usize, channels: usize) -> Result<Tensor> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Data("cannot normalize an image with zero area".into()));
    }
    let r = resolution as u32;
    let resized = if img.width() == r && img.height() == r {
        img.clone()
    } else {
        img.resize_exact(r, r, FilterType::Triangle)
    };
    let plane = resolution * resolution;
    let data = match channels {
        1 => resized.to_luma8().into_raw().into_iter().map(to_unit).collect(),
        3 => {
            let rgb = resized.to_rgb8().into_raw();
            let mut out = vec![0.0; 3 * plane];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = to_unit(px[c]);
                }
            }
            out
        }
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    Ok(Tensor::new(&[channels, resolution, resolution], data))
}

pub fn load_normalized(path: &Path, resolution: usize, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    normalize(&img, resolution, channels)
}

/// Converts a `[C, H, W]` (or `[1, C, H, W]`) tensor in `[-1, 1]` back to an
/// 8-bit image.
pub fn to_image(t: &Tensor) -> Result<DynamicImage> {
    let (c, h, w) = match t.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("expected a single image, got {s:?}"))),
    };
    let plane = h * w;
    let d = t.data();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| from_unit(v)).collect())
                .expect("sized from shape"),
        )),
        3 => {
            let mut raw = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for ch in 0..3 {
                    raw.push(from_unit(d[ch * plane + i]));
                }
            }
            Ok(DynamicImage::ImageRgb8(
                RgbImage::from_raw(w as u32, h as u32, raw).expect("sized from shape"),
            ))
        }
        c => Err(Error::Shape(format!("cannot save an image with {c} channels"))),
    }
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    to_image(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Normalized images of one domain, with the records they came from.
#[derive(Clone, Debug, Default)]
pub struct DomainImages {
    pub records: Vec<Record>,
    pub images: Vec<Tensor>,
}

impl DomainImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the selected images into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let parts: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Tensor::stack(&parts)
    }
}

/// Loads every record of `split` (all records when `None`) grouped by domain
/// label. Files that fail to decode are skipped with a warning.
pub fn load_domains(
    manifest: &DatasetManifest,
    split: Option<super::manifest::Split>,
    resolution: usize,
    channels: usize,
) -> Result<Vec<DomainImages>> {
    let mut out = vec![DomainImages::default(); manifest.num_domains()];
    for record in &manifest.records {
        if split.is_some_and(|s| s != record.split) {
            continue;
        }
        let path = manifest.resolve(record);
        match load_normalized(&path, resolution, channels) {
            Ok(t) => {
                let slot = &mut out[record.label.0];
                slot.records.push(record.clone());
                slot.images.push(t);
            }
            Err(e @ Error::Image { .. }) => log::warn!("skipping {}: {e}", path.display()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
