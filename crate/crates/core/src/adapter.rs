//! Adapter that puts an external latent-diffusion checkpoint behind the
//! [`ScoreModel`] contract.
//!
//! The adapter owns everything around the heavy model pieces: checkpoint
//! loading and validation, the `f = 8` / 4-channel latent geometry, the
//! discrete-schedule interpolation, per-caption embedding caching, and the
//! classifier-free-guidance knob. The checkpoint directory declares which
//! denoising backend fills in the rest:
//!
//! * `latent-oracle` — runs entirely in-process. Each caption maps to a
//!   target image; the noise prediction points the latent at the encoded
//!   target. This is the backend used for end-to-end runs at desk scale.
//! * anything else (`diffusers`, `torch`, ...) — requires an external
//!   inference runtime that is not bundled; loading reports a clear error.
//!
//! The image encoder is an 8x block-average over four channel projections
//! (R, G, B, luminance): cheap, deterministic, and exactly differentiable,
//! which is all the latent-space gradient path needs.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::io;
use crate::raster::RasterImage;
use crate::schedule::NoiseSchedule;
use crate::score::{hashed_tokens, Latent, ScoreModel, TextEmbedding};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "dreamseg-ldm-v1";

/// On-disk checkpoint manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdmManifest {
    pub format: String,
    pub backend: String,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub text_dim: usize,
    pub schedule: ScheduleSpec,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    #[serde(default)]
    pub targets: Vec<TargetEntry>,
}

fn default_guidance() -> f64 {
    1.0
}

/// Caption-to-image pair for the latent-oracle backend; `image` is relative
/// to the checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetEntry {
    pub caption: String,
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    ScaledLinear {
        beta_start: f64,
        beta_end: f64,
        steps: usize,
    },
    AlphaBar {
        table: Vec<f64>,
    },
}

impl ScheduleSpec {
    fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::ScaledLinear {
                beta_start,
                beta_end,
                steps,
            } => NoiseSchedule::from_scaled_linear_betas(*beta_start, *beta_end, *steps),
            ScheduleSpec::AlphaBar { table } => NoiseSchedule::from_alpha_bar(table.clone()),
        }
    }
}

/// Writes a checkpoint manifest into `dir`.
pub fn write_manifest(dir: &Path, manifest: &LdmManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(file, manifest)?;
    Ok(())
}

#[derive(Debug)]
struct EmbeddingCache {
    entries: HashMap<String, TextEmbedding>,
    hits: usize,
    misses: usize,
}

/// [`ScoreModel`] over an external latent diffusion checkpoint directory.
#[derive(Debug)]
pub struct ExternalLdmAdapter {
    factor: usize,
    channels: usize,
    text_dim: usize,
    guidance_scale: f64,
    device: String,
    schedule: NoiseSchedule,
    /// caption -> encoded target latent (latent-oracle backend).
    target_latents: BTreeMap<String, Latent>,
    mean_target: Option<Latent>,
    cache: Mutex<EmbeddingCache>,
}

/// Loads a checkpoint directory behind the [`ScoreModel`] contract.
pub fn external_ldm_adapter(model_locator: &str, device: &str) -> Result<ExternalLdmAdapter> {
    ExternalLdmAdapter::load(Path::new(model_locator), device)
}

impl ExternalLdmAdapter {
    pub fn load(dir: &Path, device: &str) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::ModelLoad(format!(
                "no checkpoint manifest at {}",
                manifest_path.display()
            )));
        }
        let manifest: LdmManifest =
            serde_json::from_reader(std::fs::File::open(&manifest_path)?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::ModelLoad(format!(
                "unsupported checkpoint format {:?} (expected {MANIFEST_FORMAT:?})",
                manifest.format
            )));
        }
        if manifest.downsample_factor != 8 || manifest.latent_channels != 4 {
            return Err(Error::ModelLoad(format!(
                "adapter requires f=8, C=4 latent geometry; manifest declares f={}, C={}",
                manifest.downsample_factor, manifest.latent_channels
            )));
        }
        if manifest.text_dim == 0 {
            return Err(Error::ModelLoad("text_dim must be >= 1".into()));
        }
        let schedule = manifest.schedule.build()?;

        let target_latents = match manifest.backend.as_str() {
            "latent-oracle" => {
                if manifest.targets.is_empty() {
                    return Err(Error::ModelLoad(
                        "latent-oracle backend needs at least one caption target".into(),
                    ));
                }
                let mut map = BTreeMap::new();
                for entry in &manifest.targets {
                    let img = io::load_image(&dir.join(&entry.image)).map_err(|e| {
                        Error::ModelLoad(format!("target image {:?}: {e}", entry.image))
                    })?;
                    let latent = encode_pooled(&img, manifest.downsample_factor)?;
                    map.insert(entry.caption.clone(), latent);
                }
                map
            }
            other => {
                return Err(Error::ModelLoad(format!(
                    "backend {other:?} requires an external inference runtime that is \
                     not bundled; available backends: latent-oracle"
                )));
            }
        };

        let mean_target = mean_latent(&target_latents);
        Ok(Self {
            factor: manifest.downsample_factor,
            channels: manifest.latent_channels,
            text_dim: manifest.text_dim,
            guidance_scale: manifest.guidance_scale,
            device: device.to_string(),
            schedule,
            target_latents,
            mean_target,
            cache: Mutex::new(EmbeddingCache {
                entries: HashMap::new(),
                hits: 0,
                misses: 0,
            }),
        })
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    /// (hits, misses) of the per-caption embedding cache.
    pub fn cache_stats(&self) -> (usize, usize) {
        let cache = self.cache.lock().unwrap();
        (cache.hits, cache.misses)
    }
}

fn mean_latent(latents: &BTreeMap<String, Latent>) -> Option<Latent> {
    let mut iter = latents.values();
    let first = iter.next()?;
    let mut acc = first.values.clone();
    let mut n = 1.0;
    for l in iter {
        acc += &l.values;
        n += 1.0;
    }
    Some(Latent {
        values: acc / n,
        factor: first.factor,
    })
}

/// Block-average encoder: four fixed channel projections (R, G, B,
/// luminance) pooled over `f x f` blocks.
pub fn encode_pooled(image: &RasterImage, factor: usize) -> Result<Latent> {
    let (h, w) = (image.height(), image.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "image dimensions {h} x {w} not divisible by encoder factor {factor}"
        )));
    }
    let (lh, lw) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut values = Array3::zeros((lh, lw, 4));
    for bi in 0..lh {
        for bj in 0..lw {
            let mut sums = [0.0f64; 3];
            for di in 0..factor {
                for dj in 0..factor {
                    for c in 0..3 {
                        sums[c] += image.pixels[[bi * factor + di, bj * factor + dj, c]];
                    }
                }
            }
            for c in 0..3 {
                values[[bi, bj, c]] = sums[c] / norm;
            }
            values[[bi, bj, 3]] = (sums[0] + sums[1] + sums[2]) / (3.0 * norm);
        }
    }
    Latent::new(values, factor)
}

/// Exact vector-Jacobian product of [`encode_pooled`].
pub fn encode_pooled_vjp(
    image: &RasterImage,
    cotangent: &Latent,
    factor: usize,
) -> Result<Array3<f64>> {
    let (h, w) = (image.height(), image.width());
    let expected = [h / factor, w / factor, 4];
    if h % factor != 0 || w % factor != 0 || cotangent.shape() != expected {
        return Err(Error::shape(
            format!("{expected:?}"),
            format!("{:?}", cotangent.shape()),
        ));
    }
    let norm = (factor * factor) as f64;
    let mut grad = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let (bi, bj) = (i / factor, j / factor);
            let lum = cotangent.values[[bi, bj, 3]] / 3.0;
            for c in 0..3 {
                grad[[i, j, c]] = (cotangent.values[[bi, bj, c]] + lum) / norm;
            }
        }
    }
    Ok(grad)
}

impl ScoreModel for ExternalLdmAdapter {
    fn encode_image(&self, image: &RasterImage) -> Result<Latent> {
        encode_pooled(image, self.factor)
    }

    fn encode_image_vjp(&self, image: &RasterImage, cotangent: &Latent) -> Result<Array3<f64>> {
        encode_pooled_vjp(image, cotangent, self.factor)
    }

    fn encode_text(&self, caption: &str) -> Result<TextEmbedding> {
        let mut cache = self.cache.lock().unwrap();
        if let Some(hit) = cache.entries.get(caption).cloned() {
            cache.hits += 1;
            return Ok(hit);
        }
        cache.misses += 1;
        let emb = TextEmbedding::new(hashed_tokens(caption, self.text_dim), caption.to_string())?;
        cache.entries.insert(caption.to_string(), emb.clone());
        Ok(emb)
    }

    fn predict_noise(&self, latent: &Latent, text: &TextEmbedding, t: f64) -> Result<Latent> {
        let target = self
            .target_latents
            .get(&text.source)
            .ok_or_else(|| Error::UnknownCaption(text.source.clone()))?;
        if target.shape() != latent.shape() {
            return Err(Error::shape(
                format!("{:?}", target.shape()),
                format!("{:?}", latent.shape()),
            ));
        }
        let a = self.schedule.alpha(t);
        let s = self.schedule.sigma(t);
        if s <= 0.0 {
            return Err(Error::invalid(format!(
                "noise prediction undefined at sigma(t) = 0 (t = {t})"
            )));
        }
        // Classifier-free guidance against the mean target as the
        // unconditional direction: eps_u + g * (eps_c - eps_u).
        let mean = self.mean_target.as_ref().expect("targets are non-empty");
        let g = self.guidance_scale;
        let guided_target = &mean.values + &((&target.values - &mean.values) * g);
        let predicted = (&latent.values - &(guided_target * a)) / s;
        Latent::new(predicted, latent.factor)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn downsample_factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        self.channels
    }
}
