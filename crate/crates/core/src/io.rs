//! File helpers: atomic writes, PNG conversion and image grids.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Pixels between grid cells.
pub const GRID_SEPARATOR: usize = 2;
/// Separator gray level (8-bit).
pub const GRID_SEPARATOR_VALUE: u8 = 255;

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit pixels for a `[0, 1]` image with 1 or 3 channels.
pub fn to_pixels(image: &Tensor3) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape();
    if c != 1 && c != 3 {
        return Err(Error::Image(format!("cannot store {c}-channel image as PNG")));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(image.at(ch, y, x)));
            }
        }
    }
    Ok(out)
}

/// PNG encoding of a `[0, 1]` image (gray for 1 channel, RGB for 3).
pub fn encode_png(image: &Tensor3) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape();
    let pixels = to_pixels(image)?;
    let dynamic = if c == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w as u32, h as u32, pixels).expect("buffer size"))
    };
    let mut out = Cursor::new(Vec::new());
    dynamic.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes an 8-bit PNG to `[0, 1]`; gray stays 1 channel, color becomes RGB.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor3> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        _ => return Err(Error::Image("only 8-bit PNG images are supported".into())),
    };
    let mut t = Tensor3::zeros([c, h, w]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                t.set(ch, y, x, raw[(y * w + x) * c + ch] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

pub fn save_png(image: &Tensor3, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

pub fn load_png(path: &Path) -> Result<Tensor3> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// Horizontal strip of equally sized cells separated by [`GRID_SEPARATOR`] columns.
pub fn grid(cells: &[Tensor3]) -> Result<Tensor3> {
    let first = cells.first().ok_or_else(|| Error::InvalidArgument("grid needs at least one cell".into()))?;
    let [c, h, w] = first.shape();
    if let Some(bad) = cells.iter().find(|t| t.shape() != [c, h, w]) {
        return Err(Error::Shape { expected: vec![c, h, w], got: bad.shape().to_vec() });
    }
    let total_w = cells.len() * w + (cells.len() - 1) * GRID_SEPARATOR;
    let mut out = Tensor3::filled([c, h, total_w], GRID_SEPARATOR_VALUE as f64 / 255.0);
    for (k, cell) in cells.iter().enumerate() {
        let x0 = k * (w + GRID_SEPARATOR);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, x0 + x, cell.at(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}
