//! Behavioral interface over a conditional diffusion score model, plus the
//! closed-form target oracle used for desk-scale verification.
//!
//! The oracle works in pixel space (identity encoder, downsample factor 1)
//! and predicts exactly the noise that points a noisy latent at a registered
//! target image:
//!
//! ```text
//! predict_noise(z_t, c, t) = (z_t - alpha(t) * target(c)) / sigma(t)
//! ```
//!
//! so the noise residual reduces to `alpha/sigma * (x_hat - target)` and every
//! convergence claim about the optimization loop becomes exactly checkable.

use ndarray::Array3;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::schedule::NoiseSchedule;

/// A latent-space tensor, `(H/f) x (W/f) x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f64>,
    /// Spatial downsample factor of the encoder that produced it.
    pub factor: usize,
}

impl Latent {
    pub fn new(values: Array3<f64>, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be >= 1"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("latent entries must be finite"));
        }
        Ok(Self { values, factor })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }
}

/// An encoded text caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// Token feature vectors, one row per token. Never empty.
    pub tokens: Vec<Vec<f64>>,
    /// The caption the embedding was computed from.
    pub source: String,
}

impl TextEmbedding {
    pub fn new(tokens: Vec<Vec<f64>>, source: String) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("text embedding must have at least one token"));
        }
        Ok(Self { tokens, source })
    }
}

/// Behavioral contract of a conditional diffusion model: a differentiable
/// image encoder, a text encoder, a noise predictor, and a schedule.
pub trait ScoreModel: Send + Sync {
    /// Deterministic, differentiable image-to-latent encoding.
    fn encode_image(&self, image: &RasterImage) -> Result<Latent>;

    /// Vector-Jacobian product of [`Self::encode_image`] at `image`: pulls a
    /// latent-shaped cotangent back to an `H x W x 3` pixel gradient.
    fn encode_image_vjp(&self, image: &RasterImage, cotangent: &Latent) -> Result<Array3<f64>>;

    fn encode_text(&self, caption: &str) -> Result<TextEmbedding>;

    /// Predicts the noise content of `latent` at time `t`, conditioned on the
    /// caption embedding. Output shape equals the input latent shape.
    fn predict_noise(&self, latent: &Latent, text: &TextEmbedding, t: f64) -> Result<Latent>;

    fn schedule(&self) -> &NoiseSchedule;

    /// Spatial downsample factor of the encoder.
    fn downsample_factor(&self) -> usize;

    /// Latent channel count.
    fn latent_channels(&self) -> usize;

    /// Latent shape produced for an `height x width` image.
    fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let f = self.downsample_factor();
        if height % f != 0 || width % f != 0 {
            return Err(Error::invalid(format!(
                "image dimensions {height} x {width} not divisible by encoder factor {f}"
            )));
        }
        Ok([height / f, width / f, self.latent_channels()])
    }
}

/// Forward-noises a latent: `alpha(t) * latent + sigma(t) * noise`.
pub fn add_noise(
    latent: &Latent,
    noise: &Latent,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if latent.shape() != noise.shape() {
        return Err(Error::shape(
            format!("{:?}", latent.shape()),
            format!("{:?}", noise.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t must be in [0, 1], got {t}")));
    }
    let a = schedule.alpha(t);
    let s = schedule.sigma(t);
    Latent::new(&latent.values * a + &noise.values * s, latent.factor)
}

/// Deterministic caption-to-vector hash, used where a real text encoder is
/// out of scope. Stable across runs and platforms.
pub(crate) fn hashed_tokens(caption: &str, dim: usize) -> Vec<Vec<f64>> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let pieces: Vec<&str> = if words.is_empty() { vec![""] } else { words };
    pieces
        .iter()
        .map(|w| {
            let mut state: u64 = 0xcbf29ce484222325;
            for b in w.bytes() {
                state ^= b as u64;
                state = state.wrapping_mul(0x100000001b3);
            }
            (0..dim)
                .map(|i| {
                    let mut x = state.wrapping_add((i as u64).wrapping_mul(0x9e3779b97f4a7c15));
                    x ^= x >> 33;
                    x = x.wrapping_mul(0xff51afd7ed558ccd);
                    x ^= x >> 33;
                    (x as f64 / u64::MAX as f64) * 2.0 - 1.0
                })
                .collect()
        })
        .collect()
}

/// Closed-form score model whose noise prediction points at a registered
/// target image per caption. Identity encoder, `f = 1`, 3 channels.
pub struct OracleScoreModel {
    targets: BTreeMap<String, RasterImage>,
    schedule: NoiseSchedule,
}

impl OracleScoreModel {
    pub fn new(targets: BTreeMap<String, RasterImage>, schedule: NoiseSchedule) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("oracle needs at least one caption -> target"));
        }
        let mut dims = None;
        for img in targets.values() {
            let d = (img.height(), img.width());
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::invalid("all oracle targets must share one shape"));
                }
                _ => {}
            }
        }
        Ok(Self { targets, schedule })
    }

    pub fn target(&self, caption: &str) -> Option<&RasterImage> {
        self.targets.get(caption)
    }
}

/// Convenience constructor mirroring the operation name used elsewhere.
pub fn oracle_score_model(
    targets: BTreeMap<String, RasterImage>,
    schedule: NoiseSchedule,
) -> Result<OracleScoreModel> {
    OracleScoreModel::new(targets, schedule)
}

impl ScoreModel for OracleScoreModel {
    fn encode_image(&self, image: &RasterImage) -> Result<Latent> {
        Latent::new(image.pixels.clone(), 1)
    }

    fn encode_image_vjp(&self, _image: &RasterImage, cotangent: &Latent) -> Result<Array3<f64>> {
        Ok(cotangent.values.clone())
    }

    fn encode_text(&self, caption: &str) -> Result<TextEmbedding> {
        TextEmbedding::new(hashed_tokens(caption, 8), caption.to_string())
    }

    fn predict_noise(&self, latent: &Latent, text: &TextEmbedding, t: f64) -> Result<Latent> {
        let target = self
            .targets
            .get(&text.source)
            .ok_or_else(|| Error::UnknownCaption(text.source.clone()))?;
        let a = self.schedule.alpha(t);
        let s = self.schedule.sigma(t);
        if s <= 0.0 {
            return Err(Error::invalid(format!(
                "oracle noise prediction undefined at sigma(t) = 0 (t = {t})"
            )));
        }
        let predicted = (&latent.values - &(&target.pixels * a)) / s;
        Latent::new(predicted, latent.factor)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn downsample_factor(&self) -> usize {
        1
    }

    fn latent_channels(&self) -> usize {
        3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{default_schedule, ScheduleKind};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gradient_image(h: usize, w: usize) -> RasterImage {
        RasterImage::new(Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            ((i + 2 * j + 3 * c) as f64 * 0.029).fract()
        }))
        .unwrap()
    }

    fn oracle_with(caption: &str, img: RasterImage) -> OracleScoreModel {
        let mut m = BTreeMap::new();
        m.insert(caption.to_string(), img);
        OracleScoreModel::new(m, default_schedule(ScheduleKind::CosineVp)).unwrap()
    }

    fn noise_like(shape: [usize; 3], seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent::new(
            Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| {
                StandardNormal.sample(&mut rng)
            }),
            1,
        )
        .unwrap()
    }

    #[test]
    fn add_noise_identity_cases() {
        let s = default_schedule(ScheduleKind::CosineVp);
        let latent = Latent::new(Array3::from_elem((2, 2, 3), 0.4), 1).unwrap();
        let noise = noise_like([2, 2, 3], 1);
        // alpha(0) = 1, sigma(0) = 0 -> latent unchanged.
        let z0 = add_noise(&latent, &noise, 0.0, &s).unwrap();
        assert_eq!(z0.values, latent.values);
        // alpha(1) = 0, sigma(1) = 1 -> pure noise.
        let z1 = add_noise(&latent, &noise, 1.0, &s).unwrap();
        for (a, b) in z1.values.iter().zip(noise.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn add_noise_scalar_arithmetic() {
        // Stub schedule with alpha = 0.6, sigma = 0.8 at the chosen t:
        // linear-vp has alpha = sqrt(1 - t); t = 0.64 gives exactly that.
        let s = NoiseSchedule::linear_vp();
        let t = 0.64;
        assert!((s.alpha(t) - 0.6).abs() < 1e-12);
        assert!((s.sigma(t) - 0.8).abs() < 1e-12);
        let ones = Latent::new(Array3::from_elem((2, 3, 3), 1.0), 1).unwrap();
        let z = add_noise(&ones, &ones, t, &s).unwrap();
        for v in z.values.iter() {
            assert!((v - 1.4).abs() < 1e-12);
        }
    }

    #[test]
    fn add_noise_rejects_shape_mismatch() {
        let s = default_schedule(ScheduleKind::CosineVp);
        let a = Latent::new(Array3::zeros((2, 2, 3)), 1).unwrap();
        let b = Latent::new(Array3::zeros((2, 3, 3)), 1).unwrap();
        assert!(add_noise(&a, &b, 0.5, &s).is_err());
    }

    #[test]
    fn oracle_recovers_exact_noise_at_the_target() {
        let img = gradient_image(4, 4);
        let model = oracle_with("cap", img.clone());
        let z = model.encode_image(&img).unwrap();
        let eps = noise_like([4, 4, 3], 5);
        let t = 0.37;
        let z_t = add_noise(&z, &eps, t, model.schedule()).unwrap();
        let emb = model.encode_text("cap").unwrap();
        let pred = model.predict_noise(&z_t, &emb, t).unwrap();
        for (p, e) in pred.values.iter().zip(eps.values.iter()) {
            assert!((p - e).abs() < 1e-9, "algebraic cancellation failed");
        }
    }

    #[test]
    fn oracle_residual_is_scaled_image_difference() {
        let target = gradient_image(4, 4);
        let model = oracle_with("cap", target.clone());
        let mut off = target.clone();
        off.pixels[[1, 2, 0]] = (off.pixels[[1, 2, 0]] + 0.25).min(1.0);
        let z = model.encode_image(&off).unwrap();
        let eps = noise_like([4, 4, 3], 9);
        let t = 0.51;
        let z_t = add_noise(&z, &eps, t, model.schedule()).unwrap();
        let emb = model.encode_text("cap").unwrap();
        let pred = model.predict_noise(&z_t, &emb, t).unwrap();
        let a = model.schedule().alpha(t);
        let s = model.schedule().sigma(t);
        for ((p, e), (x, y)) in pred
            .values
            .iter()
            .zip(eps.values.iter())
            .zip(off.pixels.iter().zip(target.pixels.iter()))
        {
            let expected = a / s * (x - y);
            assert!(
                ((p - e) - expected).abs() < 1e-9,
                "residual {} vs expected {expected}",
                p - e
            );
        }
    }

    #[test]
    fn oracle_encoder_is_identity() {
        let img = gradient_image(3, 5);
        let model = oracle_with("cap", img.clone());
        let z = model.encode_image(&img).unwrap();
        assert_eq!(z.values, img.pixels);
        assert_eq!(z.factor, 1);
    }

    #[test]
    fn unknown_caption_errors_at_predict_time() {
        let model = oracle_with("known", gradient_image(2, 2));
        let z = Latent::new(Array3::zeros((2, 2, 3)), 1).unwrap();
        let emb = model.encode_text("unknown").unwrap();
        match model.predict_noise(&z, &emb, 0.5) {
            Err(Error::UnknownCaption(c)) => assert_eq!(c, "unknown"),
            other => panic!("expected UnknownCaption, got {other:?}"),
        }
    }

    #[test]
    fn oracle_rejects_mismatched_target_shapes() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), gradient_image(2, 2));
        m.insert("b".to_string(), gradient_image(3, 3));
        assert!(OracleScoreModel::new(m, default_schedule(ScheduleKind::CosineVp)).is_err());
    }

    #[test]
    fn predict_noise_preserves_shape() {
        let model = oracle_with("cap", gradient_image(4, 6));
        let z = Latent::new(Array3::zeros((4, 6, 3)), 1).unwrap();
        let emb = model.encode_text("cap").unwrap();
        let pred = model.predict_noise(&z, &emb, 0.5).unwrap();
        assert_eq!(pred.shape(), z.shape());
    }

    #[test]
    fn hashed_tokens_are_stable_and_nonempty() {
        let a = hashed_tokens("a red square", 8);
        let b = hashed_tokens("a red square", 8);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(!hashed_tokens("", 8).is_empty());
    }
}
