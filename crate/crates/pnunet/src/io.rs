//! Image and raw-array files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use pnunet_core::imaging::{image_from_u16, image_from_u8, to_grayscale};
use pnunet_core::{Image, Tensor};

use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm", "bmp", "jpg", "jpeg"];

/// Load an 8- or 16-bit image into `[0, 1]`. Alpha is dropped. With
/// `grayscale`, color images are reduced to their channel average.
pub fn load_image(path: &Path, grayscale: bool) -> Result<Image> {
    let dynamic = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let image = match dynamic {
        DynamicImage::ImageLuma8(b) => image_from_u8(h, w, 1, b.as_raw()),
        DynamicImage::ImageLumaA8(_) => image_from_u8(h, w, 1, dynamic.to_luma8().as_raw()),
        DynamicImage::ImageRgb8(b) => image_from_u8(h, w, 3, b.as_raw()),
        DynamicImage::ImageRgba8(_) => image_from_u8(h, w, 3, dynamic.to_rgb8().as_raw()),
        DynamicImage::ImageLuma16(b) => image_from_u16(h, w, 1, b.as_raw()),
        DynamicImage::ImageLumaA16(_) => image_from_u16(h, w, 1, dynamic.to_luma16().as_raw()),
        DynamicImage::ImageRgb16(b) => image_from_u16(h, w, 3, b.as_raw()),
        DynamicImage::ImageRgba16(_) => image_from_u16(h, w, 3, dynamic.to_rgb16().as_raw()),
        other => {
            return Err(Error::format(path, format!("unsupported sample format {:?}", other.color())));
        }
    }
    .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(if grayscale && image.channels() == 3 {
        to_grayscale(&image)
    } else {
        image
    })
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit PNG (or any format implied by the extension) of an image in `[0, 1]`.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.shape();
    let raw: Vec<u8> = image.data().iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let img = match c {
        1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).unwrap()),
        3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).unwrap()),
        _ => return Err(Error::format(path, format!("cannot write {c}-channel image"))),
    };
    save(path, img)
}

/// 16-bit grayscale PNG of a single-channel map, min-max normalized. A
/// constant map is written as all zeros.
pub fn save_map_png16(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w, _) = map.shape();
    let plane = map.channel_mean();
    let (lo, hi) = (plane.min(), plane.max());
    let span = hi - lo;
    let raw: Vec<u16> = plane
        .data()
        .iter()
        .map(|&v| if span > 0.0 { quantize((v - lo) / span, 65535.0) as u16 } else { 0 })
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw).unwrap();
    save(path, DynamicImage::ImageLuma16(buf))
}

/// 16-bit grayscale PNG of values already in `[0, 1]` (no normalization).
pub fn save_unit_png16(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w, _) = map.shape();
    let raw: Vec<u16> = map.channel_mean().data().iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw).unwrap();
    save(path, DynamicImage::ImageLuma16(buf))
}

/// 8-bit PNG with 255 where `mask > 0.5`.
pub fn save_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w, _) = mask.shape();
    let raw: Vec<u8> = mask.channel_mean().data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).unwrap();
    save(path, DynamicImage::ImageLuma8(buf))
}

/// Raw little-endian `f32`, row-major with channels interleaved.
pub fn save_f32(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = tensor.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::corrupt(path, format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
}
