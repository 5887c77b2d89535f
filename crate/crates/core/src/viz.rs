//! Presentation helpers: overlays, tiled strips/grids, and a minimal line
//! plot renderer. No text rendering — these are diagnostic images.

use ndarray::{Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Blends a white highlight over the image where the mask is high.
pub fn overlay(image: &RasterImage, mask: &ArrayView2<'_, f64>, strength: f64) -> Result<RasterImage> {
    let (h, w) = (image.height(), image.width());
    if mask.shape() != [h, w] {
        return Err(Error::shape(
            format!("{h} x {w}"),
            format!("{:?}", mask.shape()),
        ));
    }
    let s = strength.clamp(0.0, 1.0);
    let mut pixels = image.pixels.clone();
    for i in 0..h {
        for j in 0..w {
            let a = s * mask[[i, j]].clamp(0.0, 1.0);
            for c in 0..3 {
                pixels[[i, j, c]] = ((1.0 - a) * pixels[[i, j, c]] + a).clamp(0.0, 1.0);
            }
        }
    }
    RasterImage::new(pixels)
}

/// Grayscale image of a mask plane.
pub fn mask_to_image(mask: &ArrayView2<'_, f64>) -> Result<RasterImage> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let pixels = Array3::from_shape_fn((h, w, 3), |(i, j, _)| mask[[i, j]].clamp(0.0, 1.0));
    RasterImage::new(pixels)
}

/// Tiles images into a `rows x cols` grid with a light gap between cells.
/// All tiles must share one shape; `images` is row-major.
pub fn tile_grid(images: &[RasterImage], rows: usize, cols: usize, gap: usize) -> Result<RasterImage> {
    if images.is_empty() || rows * cols != images.len() {
        return Err(Error::invalid(format!(
            "tile_grid needs rows*cols == images ({rows}x{cols} vs {})",
            images.len()
        )));
    }
    let (th, tw) = (images[0].height(), images[0].width());
    if !images.iter().all(|im| im.height() == th && im.width() == tw) {
        return Err(Error::invalid("all tiles must share one shape"));
    }
    let h = rows * th + gap * (rows.saturating_sub(1));
    let w = cols * tw + gap * (cols.saturating_sub(1));
    let mut pixels = Array3::from_elem((h, w, 3), 1.0);
    for (idx, img) in images.iter().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        let (oi, oj) = (r * (th + gap), c * (tw + gap));
        for i in 0..th {
            for j in 0..tw {
                for ch in 0..3 {
                    pixels[[oi + i, oj + j, ch]] = img.pixels[[i, j, ch]];
                }
            }
        }
    }
    RasterImage::new(pixels)
}

/// Horizontal strip of equally sized frames (a timelapse row).
pub fn tile_strip(images: &[RasterImage], gap: usize) -> Result<RasterImage> {
    tile_grid(images, 1, images.len(), gap)
}

/// Renders line series into a fixed-size chart image. Axes are drawn in
/// gray; each series gets a color from a small palette. The y-range is the
/// joint min/max of all series.
pub fn render_line_plot(series: &[Vec<f64>], height: usize, width: usize) -> Result<RasterImage> {
    if series.is_empty() || series.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("plot needs at least one non-empty series"));
    }
    let (h, w) = (height.max(64), width.max(64));
    let margin = 12usize;
    let mut pixels = Array3::from_elem((h, w, 3), 1.0);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in s {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid("plot series contain no finite values"));
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }

    // Axes.
    for i in margin..h - margin {
        set_px(&mut pixels, i, margin, [0.6, 0.6, 0.6]);
    }
    for j in margin..w - margin {
        set_px(&mut pixels, h - margin - 1, j, [0.6, 0.6, 0.6]);
    }

    let palette = [
        [0.12, 0.35, 0.80],
        [0.85, 0.25, 0.15],
        [0.10, 0.60, 0.30],
        [0.65, 0.30, 0.70],
    ];
    let plot_w = (w - 2 * margin - 1) as f64;
    let plot_h = (h - 2 * margin - 1) as f64;
    for (si, s) in series.iter().enumerate() {
        if s.len() < 2 {
            continue;
        }
        let color = palette[si % palette.len()];
        let to_xy = |idx: usize, v: f64| -> (i64, i64) {
            let x = margin as f64 + plot_w * idx as f64 / (s.len() - 1) as f64;
            let yf = (v.clamp(lo, hi) - lo) / (hi - lo);
            let y = (h - margin - 1) as f64 - plot_h * yf;
            (y.round() as i64, x.round() as i64)
        };
        let mut prev = to_xy(0, s[0]);
        for (idx, &v) in s.iter().enumerate().skip(1) {
            let next = to_xy(idx, v);
            draw_line(&mut pixels, prev, next, color);
            prev = next;
        }
    }
    RasterImage::new(pixels)
}

fn set_px(pixels: &mut Array3<f64>, i: usize, j: usize, color: [f64; 3]) {
    if i < pixels.shape()[0] && j < pixels.shape()[1] {
        for c in 0..3 {
            pixels[[i, j, c]] = color[c];
        }
    }
}

fn draw_line(pixels: &mut Array3<f64>, from: (i64, i64), to: (i64, i64), color: [f64; 3]) {
    let (mut i0, mut j0) = from;
    let (i1, j1) = to;
    let di = (i1 - i0).abs();
    let dj = (j1 - j0).abs();
    let si = if i0 < i1 { 1 } else { -1 };
    let sj = if j0 < j1 { 1 } else { -1 };
    let mut err = dj - di;
    loop {
        if i0 >= 0 && j0 >= 0 {
            set_px(pixels, i0 as usize, j0 as usize, color);
        }
        if i0 == i1 && j0 == j1 {
            break;
        }
        let e2 = 2 * err;
        if e2 > -di {
            err -= di;
            j0 += sj;
        }
        if e2 < dj {
            err += dj;
            i0 += si;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn overlay_full_mask_pushes_toward_white() {
        let img = RasterImage::filled(2, 2, [0.0, 0.0, 0.0]).unwrap();
        let mask = Array2::from_elem((2, 2), 1.0);
        let out = overlay(&img, &mask.view(), 0.6).unwrap();
        assert!(out.pixels.iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn grid_shape_accounts_for_gaps() {
        let tiles: Vec<RasterImage> = (0..6)
            .map(|i| RasterImage::filled(4, 5, [i as f64 / 6.0, 0.0, 0.0]).unwrap())
            .collect();
        let grid = tile_grid(&tiles, 2, 3, 2).unwrap();
        assert_eq!(grid.height(), 2 * 4 + 2);
        assert_eq!(grid.width(), 3 * 5 + 2 * 2);
    }

    #[test]
    fn plot_renders_non_blank() {
        let series = vec![vec![0.0, 0.5, 0.25, 0.9], vec![0.9, 0.1, 0.4, 0.2]];
        let img = render_line_plot(&series, 120, 200).unwrap();
        let non_white = img.pixels.outer_iter().flatten().filter(|v| **v < 0.99).count();
        assert!(non_white > 50, "plot appears blank");
    }
}
