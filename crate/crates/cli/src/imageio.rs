use std::path::Path;

use anyhow::{Context, Result};
use feallm_core::region_cropper::ImageTensor;
use image::RgbImage;

pub fn load(path: &Path) -> Result<ImageTensor> {
    let rgb = image::open(path)
        .with_context(|| format!("cannot decode image {}", path.display()))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data).with_context(|| format!("unusable image {}", path.display()))
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let rgb = RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .context("pixel buffer does not match image size")?;
    rgb.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// `<dir>/<image_id>.png`, falling back to `.jpg`.
pub fn load_by_id(dir: &Path, image_id: &str) -> Result<ImageTensor> {
    let png = dir.join(format!("{image_id}.png"));
    if png.exists() {
        return load(&png);
    }
    load(&dir.join(format!("{image_id}.jpg")))
}
