//! PNG serialization for images, masks, and binary masks.
//!
//! Alpha masks go to 8-bit single-channel files as `round(alpha * 255)`;
//! binary masks use 0 for background and 255 for the region.

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, RasterImage};

pub fn load_image(path: &Path) -> Result<RasterImage> {
    let img = ImageReader::open(path)?.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
    });
    RasterImage::new(pixels)
}

pub fn save_image(path: &Path, image: &RasterImage) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut out = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                to_u8(image.pixels[[i, j, 0]]),
                to_u8(image.pixels[[i, j, 1]]),
                to_u8(image.pixels[[i, j, 2]]),
            ];
            out.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn save_mask(path: &Path, plane: &ArrayView2<'_, f64>) -> Result<()> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            out.put_pixel(j as u32, i as u32, image::Luma([to_u8(plane[[i, j]])]));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    let img = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
    }))
}

pub fn save_binary_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let plane = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    save_mask(path, &plane.view())
}

/// Loads an 8-bit mask file as a binary mask; values >= 128 count as region.
pub fn load_binary_mask(path: &Path) -> Result<BinaryMask> {
    let plane = load_mask(path)?;
    Ok(plane.mapv(|v| v >= 0.5))
}

/// Single-channel metadata check used by the dataset loader.
pub fn mask_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path)?;
    Ok((h as usize, w as usize))
}

pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    if !path.exists() {
        return Err(Error::Manifest(format!("missing file: {}", path.display())));
    }
    let (w, h) = image::image_dimensions(path)?;
    Ok((h as usize, w as usize))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn image_roundtrip_is_exact_on_the_8bit_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let pixels = Array3::from_shape_fn((5, 7, 3), |(i, j, c)| {
            ((i * 31 + j * 7 + c * 3) % 256) as f64 / 255.0
        });
        let img = RasterImage::new(pixels).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn mask_roundtrip_quantizes_to_255ths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let plane = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64) / 15.0);
        save_mask(&path, &plane.view()).unwrap();
        let back = load_mask(&path).unwrap();
        for (a, b) in back.iter().zip(plane.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn binary_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bin.png");
        let mask = Array2::from_shape_fn((3, 3), |(i, j)| (i + j) % 2 == 0);
        save_binary_mask(&path, &mask).unwrap();
        assert_eq!(load_binary_mask(&path).unwrap(), mask);
    }
}
