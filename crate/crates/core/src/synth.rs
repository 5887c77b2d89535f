//! Generators for the self-checking oracle instances: single scenes, JSONL
//! datasets, and composite-grid targets. Everything is seeded and
//! deterministic, so recovery numbers are reproducible.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::io;
use crate::raster::{BinaryMask, RasterImage};

const FG_PALETTE: [(&str, [f64; 3]); 4] = [
    ("red", [0.95, 0.05, 0.08]),
    ("blue", [0.08, 0.05, 0.95]),
    ("green", [0.05, 0.85, 0.10]),
    ("magenta", [0.90, 0.08, 0.90]),
];

const BACKGROUND_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

/// A generated scene with its ground truth and the matching oracle target.
#[derive(Debug, Clone)]
pub struct OracleScene {
    /// The image to segment: a colored shape over gray.
    pub image: RasterImage,
    /// The oracle's target for `caption` — the ground-truth composite of the
    /// foreground over gray, i.e. the scene itself.
    pub target: RasterImage,
    pub gt_mask: BinaryMask,
    pub caption: String,
}

/// Builds a deterministic foreground-over-gray scene.
///
/// The shape (disk or square), its color, and a small center jitter all
/// derive from the seed.
pub fn oracle_scene(height: usize, width: usize, seed: u64) -> Result<OracleScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (color_name, color) = FG_PALETTE[(rng.random::<u32>() as usize) % FG_PALETTE.len()];
    let round = rng.random::<bool>();
    let min_dim = height.min(width) as f64;
    let radius = 0.36 * min_dim;
    let jitter = min_dim / 16.0;
    let ci = height as f64 / 2.0 + (rng.random::<f64>() - 0.5) * jitter;
    let cj = width as f64 / 2.0 + (rng.random::<f64>() - 0.5) * jitter;

    let gt_mask: BinaryMask = Array2::from_shape_fn((height, width), |(i, j)| {
        let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
        if round {
            di * di + dj * dj <= radius * radius
        } else {
            di.abs() <= radius && dj.abs() <= radius * 0.9
        }
    });

    let pixels = Array3::from_shape_fn((height, width, 3), |(i, j, c)| {
        if gt_mask[[i, j]] {
            color[c]
        } else {
            BACKGROUND_GRAY[c]
        }
    });
    let image = RasterImage::new(pixels)?;
    let shape_name = if round { "disk" } else { "square" };
    Ok(OracleScene {
        target: image.clone(),
        image,
        gt_mask,
        caption: format!("the {color_name} {shape_name}"),
    })
}

/// One line of the JSONL dataset manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetEntry {
    pub image: String,
    pub captions: Vec<String>,
    pub masks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    /// Oracle target images, aligned with `captions`; used by the oracle
    /// backend during evaluation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub oracle_targets: Vec<String>,
}

/// Writes a synthetic oracle dataset under `dir`: per-sample scene image,
/// ground-truth mask, oracle target, and a `manifest.jsonl` tying them
/// together. Returns the manifest path.
pub fn write_oracle_dataset(
    dir: &Path,
    samples: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("targets"))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut lines = Vec::with_capacity(samples);
    for s in 0..samples {
        let scene = oracle_scene(height, width, seed.wrapping_add(s as u64))?;
        let image_rel = format!("images/{s:03}.png");
        let mask_rel = format!("masks/{s:03}.png");
        let target_rel = format!("targets/{s:03}.png");
        io::save_image(&dir.join(&image_rel), &scene.image)?;
        io::save_binary_mask(&dir.join(&mask_rel), &scene.gt_mask)?;
        io::save_image(&dir.join(&target_rel), &scene.target)?;
        let class = scene
            .caption
            .rsplit(' ')
            .next()
            .unwrap_or("shape")
            .to_string();
        let entry = DatasetEntry {
            image: image_rel,
            captions: vec![scene.caption.clone()],
            masks: vec![mask_rel],
            class: Some(class),
            oracle_targets: vec![target_rel],
        };
        lines.push(serde_json::to_string(&entry)?);
    }
    std::fs::write(&manifest_path, lines.join("\n") + "\n")?;
    Ok(manifest_path)
}

/// Ground truth for a composite-grid run: smooth foregrounds, flat-ish
/// backgrounds, disk alphas, and the per-cell composite targets.
#[derive(Debug, Clone)]
pub struct GridTargets {
    pub fg_prompts: Vec<String>,
    pub bg_prompts: Vec<String>,
    pub template: String,
    /// `cells[n][m]` is the target composite for (foreground n, background m).
    pub cells: Vec<Vec<RasterImage>>,
    pub captions: Vec<Vec<String>>,
}

/// Builds N x M composite targets with known factorization.
pub fn grid_oracle_targets(
    n_fg: usize,
    n_bg: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<GridTargets> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = "a {fg} by a {bg}".to_string();

    let mut foregrounds = Vec::with_capacity(n_fg);
    let mut alphas = Vec::with_capacity(n_fg);
    let mut fg_prompts = Vec::with_capacity(n_fg);
    for n in 0..n_fg {
        let (name, color) = FG_PALETTE[n % FG_PALETTE.len()];
        let phase: f64 = rng.random::<f64>();
        let fg = RasterImage::new(Array3::from_shape_fn((height, width, 3), |(i, j, c)| {
            let wobble =
                0.15 * ((i as f64 / height as f64 + j as f64 / width as f64 + phase) * 6.0).sin();
            (color[c] * 0.8 + 0.1 + wobble * 0.3).clamp(0.1, 0.9)
        }))?;
        let r = (0.22 + 0.06 * (n % 3) as f64) * height.min(width) as f64;
        let (ci, cj) = (height as f64 / 2.0, width as f64 / 2.0);
        let alpha = Array2::from_shape_fn((height, width), |(i, j)| {
            let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
            if di * di + dj * dj <= r * r {
                0.9
            } else {
                0.1
            }
        });
        foregrounds.push(fg);
        alphas.push(alpha);
        fg_prompts.push(format!("{name} shape {n}"));
    }

    let mut backgrounds = Vec::with_capacity(n_bg);
    let mut bg_prompts = Vec::with_capacity(n_bg);
    for m in 0..n_bg {
        let base = 0.2 + 0.6 * (m as f64 + 0.5) / n_bg as f64;
        let tint: f64 = rng.random::<f64>() * 0.15;
        let bg = RasterImage::new(Array3::from_shape_fn((height, width, 3), |(i, _, c)| {
            let grade = 0.1 * (i as f64 / height as f64 - 0.5);
            (base + grade + if c == m % 3 { tint } else { 0.0 }).clamp(0.1, 0.9)
        }))?;
        backgrounds.push(bg);
        bg_prompts.push(format!("field {m}"));
    }

    let mut cells = Vec::with_capacity(n_fg);
    let mut captions = Vec::with_capacity(n_fg);
    for n in 0..n_fg {
        let mut row = Vec::with_capacity(n_bg);
        let mut crow = Vec::with_capacity(n_bg);
        for m in 0..n_bg {
            let pixels = Array3::from_shape_fn((height, width, 3), |(i, j, c)| {
                let a = alphas[n][[i, j]];
                (a * foregrounds[n].pixels[[i, j, c]]
                    + (1.0 - a) * backgrounds[m].pixels[[i, j, c]])
                .clamp(0.0, 1.0)
            });
            row.push(RasterImage::new(pixels)?);
            crow.push(fill_template(&template, &fg_prompts[n], &bg_prompts[m]));
        }
        cells.push(row);
        captions.push(crow);
    }

    Ok(GridTargets {
        fg_prompts,
        bg_prompts,
        template,
        cells,
        captions,
    })
}

/// Substitutes `{fg}` / `{bg}` placeholders in a caption template.
pub fn fill_template(template: &str, fg: &str, bg: &str) -> String {
    template.replace("{fg}", fg).replace("{bg}", bg)
}
