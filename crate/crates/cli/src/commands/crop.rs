use std::path::Path;

use anyhow::{Context, Result};
use feallm_core::region_cropper::{crop_window, extract_window, resize_bilinear, CropMode, CropSpec};
use serde_json::json;

use crate::config::RunConfig;
use crate::imageio;

/// Writes the sixteen resized regions as PNGs plus `manifest.json` with the
/// pixel window of each.
pub fn run(cfg: &RunConfig, image_path: &Path, out: &Path) -> Result<()> {
    let image = imageio::load(image_path)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut regions = Vec::new();
    for (index, spec) in CropSpec::canonical().into_iter().enumerate() {
        let window = crop_window(image.height(), image.width(), spec, CropMode::Strip)?;
        let region = resize_bilinear(&extract_window(&image, &window));
        let file = format!("{index:02}_{}.png", spec.label());
        imageio::save_png(&region, &out.join(&file))?;
        regions.push(json!({
            "index": index,
            "label": spec.label(),
            "direction": spec.direction,
            "fraction": spec.fraction,
            "file": file,
            "window": window,
        }));
    }
    let manifest = json!({
        "meta": cfg.meta("crop-preview"),
        "height": image.height(),
        "width": image.width(),
        "regions": regions,
    });
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote 16 regions to {}", out.display());
    Ok(())
}
