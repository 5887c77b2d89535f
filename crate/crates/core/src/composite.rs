//! Alpha compositing of the input image over random uniform backgrounds.
//!
//! The blend is `mask * image + (1 - mask) * background`, applied per pixel
//! and channel. Its derivative with respect to the mask is `image -
//! background`, which is what the loss module chains through.

use ndarray::{Array3, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{AlphaMaskStack, RasterImage};

/// A solid background color in the RGB unit cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformBackground {
    pub color: [f64; 3],
}

impl UniformBackground {
    pub fn new(color: [f64; 3]) -> Result<Self> {
        if !color.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background color must be in [0, 1]^3"));
        }
        Ok(Self { color })
    }
}

/// One composite per (mask, background) pair, ordered mask-major.
#[derive(Debug, Clone)]
pub struct CompositeBatch {
    /// `(composite, mask index k, background index j)` triples.
    pub composites: Vec<(RasterImage, usize, usize)>,
    /// Backgrounds per mask.
    pub n_b: usize,
}

/// Draws `n_b` colors uniformly over the RGB unit cube.
///
/// Consumes exactly `3 * n_b` values from the stream, in (r, g, b) order per
/// color.
pub fn sample_backgrounds<R: Rng + ?Sized>(n_b: usize, rng: &mut R) -> Result<Vec<UniformBackground>> {
    if n_b == 0 {
        return Err(Error::invalid("n_b must be >= 1"));
    }
    let mut out = Vec::with_capacity(n_b);
    for _ in 0..n_b {
        let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        out.push(UniformBackground { color });
    }
    Ok(out)
}

/// Per-pixel convex blend of `image` over `background` under one mask plane.
pub fn composite(
    image: &RasterImage,
    mask: &ArrayView2<'_, f64>,
    background: &UniformBackground,
) -> Result<RasterImage> {
    let (h, w) = (image.height(), image.width());
    if mask.shape() != [h, w] {
        return Err(Error::shape(
            format!("{h} x {w}"),
            format!("{:?}", mask.shape()),
        ));
    }
    let mut pixels = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let a = mask[[i, j]];
            for c in 0..3 {
                // Clamp to absorb the one-ulp rounding excursions of the blend.
                pixels[[i, j, c]] = (a * image.pixels[[i, j, c]]
                    + (1.0 - a) * background.color[c])
                    .clamp(0.0, 1.0);
            }
        }
    }
    RasterImage::new(pixels)
}

/// Builds the full composite batch: one blend per (k, j) pair, mask-major.
pub fn composite_batch(
    image: &RasterImage,
    masks: &AlphaMaskStack,
    backgrounds: &[UniformBackground],
) -> Result<CompositeBatch> {
    if backgrounds.is_empty() {
        return Err(Error::invalid("background list must be non-empty"));
    }
    let mut composites = Vec::with_capacity(masks.k() * backgrounds.len());
    for k in 0..masks.k() {
        let plane = masks.plane(k);
        for (j, bg) in backgrounds.iter().enumerate() {
            composites.push((composite(image, &plane, bg)?, k, j));
        }
    }
    Ok(CompositeBatch {
        composites,
        n_b: backgrounds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image() -> RasterImage {
        RasterImage::new(Array3::from_shape_fn((4, 5, 3), |(i, j, c)| {
            ((i * 5 + j + c) as f64 * 0.041).fract()
        }))
        .unwrap()
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let xs = sample_backgrounds(4, &mut a).unwrap();
        let ys = sample_backgrounds(4, &mut b).unwrap();
        assert_eq!(xs, ys);
    }

    #[test]
    fn single_sample_in_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bg = sample_backgrounds(1, &mut rng).unwrap();
        assert_eq!(bg.len(), 1);
        assert!(bg[0].color.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn zero_samples_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_backgrounds(0, &mut rng).is_err());
    }

    #[test]
    fn sampler_consumes_exactly_three_draws_per_color() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        sample_backgrounds(3, &mut a).unwrap();
        for _ in 0..9 {
            let _: f64 = b.random();
        }
        // Both streams must now be in the same position.
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn empirical_mean_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let bgs = sample_backgrounds(n, &mut rng).unwrap();
        for c in 0..3 {
            let mean: f64 = bgs.iter().map(|b| b.color[c]).sum::<f64>() / n as f64;
            assert!((mean - 0.5).abs() < 0.01, "channel {c} mean {mean}");
        }
    }

    #[test]
    fn full_mask_returns_the_image() {
        let img = test_image();
        let mask = Array2::from_elem((4, 5), 1.0);
        let bg = UniformBackground::new([0.2, 0.9, 0.1]).unwrap();
        let out = composite(&img, &mask.view(), &bg).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn empty_mask_returns_the_background() {
        let img = test_image();
        let mask = Array2::zeros((4, 5));
        let bg = UniformBackground::new([0.2, 0.9, 0.1]).unwrap();
        let out = composite(&img, &mask.view(), &bg).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                for c in 0..3 {
                    assert_eq!(out.pixels[[i, j, c]], bg.color[c]);
                }
            }
        }
    }

    #[test]
    fn half_mask_blends_linearly() {
        let img = RasterImage::filled(2, 2, [1.0, 1.0, 1.0]).unwrap();
        let mask = Array2::from_elem((2, 2), 0.5);
        let bg = UniformBackground::new([0.0, 0.0, 0.0]).unwrap();
        let out = composite(&img, &mask.view(), &bg).unwrap();
        assert!(out.pixels.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = test_image();
        let mask = Array2::zeros((5, 4));
        let bg = UniformBackground::new([0.0, 0.0, 0.0]).unwrap();
        assert!(composite(&img, &mask.view(), &bg).is_err());
    }

    #[test]
    fn batch_is_mask_major_and_matches_brute_force() {
        let img = test_image();
        let masks = AlphaMaskStack::new(Array3::from_shape_fn((2, 4, 5), |(k, i, j)| {
            ((k + i + j) as f64 * 0.13).fract()
        }))
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bgs = sample_backgrounds(3, &mut rng).unwrap();
        let batch = composite_batch(&img, &masks, &bgs).unwrap();
        assert_eq!(batch.composites.len(), 6);
        assert_eq!(batch.n_b, 3);

        for (idx, (comp, k, j)) in batch.composites.iter().enumerate() {
            assert_eq!(*k, idx / 3);
            assert_eq!(*j, idx % 3);
            // Brute-force per-pixel oracle.
            for i in 0..4 {
                for jj in 0..5 {
                    let a = masks.alphas[[*k, i, jj]];
                    for c in 0..3 {
                        let want = a * img.pixels[[i, jj, c]] + (1.0 - a) * bgs[*j].color[c];
                        assert!((comp.pixels[[i, jj, c]] - want).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_derivative_is_image_minus_background() {
        // Central finite differences on a single mask entry.
        let img = test_image();
        let bg = UniformBackground::new([0.3, 0.6, 0.9]).unwrap();
        let mut mask = Array2::from_elem((4, 5), 0.4);
        let eps = 1e-6;
        let probe = |m: &Array2<f64>| -> f64 {
            let out = composite(&img, &m.view(), &bg).unwrap();
            out.pixels.sum()
        };
        mask[[2, 3]] = 0.4 + eps;
        let plus = probe(&mask);
        mask[[2, 3]] = 0.4 - eps;
        let minus = probe(&mask);
        let fd = (plus - minus) / (2.0 * eps);
        let analytic: f64 = (0..3)
            .map(|c| img.pixels[[2, 3, c]] - bg.color[c])
            .sum();
        assert!(
            (fd - analytic).abs() / analytic.abs().max(1e-9) < 1e-5,
            "fd {fd} vs analytic {analytic}"
        );
    }
}
