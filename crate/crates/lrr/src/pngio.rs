//! 8-bit RGB PNG reading and writing.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use lrr_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PngError {
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Shape(String),
}

/// Loads a PNG as an `[H, W, 3]` tensor in `[0, 1]`. Other color types are
/// converted to RGB.
pub fn load_png(path: &Path) -> Result<Tensor, PngError> {
    let img = image::open(path).map_err(|source| PngError::Image { path: path.display().to_string(), source })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new([h as usize, w as usize, 3], data).map_err(|e| PngError::Shape(e.to_string()))
}

/// Writes an `[H, W, 3]` tensor, rounding each value clamped to `[0, 1]`.
pub fn save_png(t: &Tensor, path: &Path) -> Result<(), PngError> {
    let (h, w, c) = t.dims3().map_err(|e| PngError::Shape(e.to_string()))?;
    if c != 3 {
        return Err(PngError::Shape(format!("expected 3 channels, got {}", c)));
    }
    let bytes: Vec<u8> = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, bytes).expect("buffer sized from tensor");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| PngError::Image { path: path.display().to_string(), source })
}

/// All `*.png` files of a directory in name order.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>, PngError> {
    let rd = std::fs::read_dir(dir).map_err(|source| PngError::Io { path: dir.display().to_string(), source })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}
