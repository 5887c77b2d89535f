//! The dream loss gradient and the auxiliary mask losses.
//!
//! The dream gradient treats the denoiser as a fixed gradient source: the
//! noise residual `eps_hat - eps` is taken at face value (no Jacobian
//! through the noise predictor) and chained back through the encoder
//! linearization, the compositing blend, and the mask rasterizer. The
//! auxiliary terms are a gravity loss (plain sum of mask values, pulling
//! masks empty absent other incentive) and a pairwise-overlap intersection
//! penalty for multi-caption object segmentation.

use ndarray::{Array2, Array3};

use crate::composite::UniformBackground;
use crate::error::{Error, Result};
use crate::mask::{MaskParamGrad, MaskParams};
use crate::raster::{AlphaMaskStack, RasterImage};
use crate::score::{add_noise, Latent, ScoreModel};
use serde::{Deserialize, Serialize};

/// How a latent-space residual is brought back to pixel resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentGradMode {
    /// Exact vector-Jacobian product of the image encoder.
    ThroughEncoder,
    /// Nearest-neighbor broadcast of the latent gradient onto pixels — the
    /// literal per-pixel reading. Identical to `ThroughEncoder` for
    /// identity encoders.
    NearestPixel,
}

/// One dream-gradient evaluation for a single composite.
#[derive(Debug, Clone)]
pub struct DreamGradSample {
    pub t: f64,
    /// The frozen noise draw used at this step.
    pub eps: Latent,
    /// `eps_hat - eps`, latent-shaped.
    pub residual: Latent,
    /// Upstream gradient on the composite image, `H x W x 3`:
    /// `weight(t) * alpha(t) *` (residual pulled back through the encoder).
    pub pixel_grad: Array3<f64>,
    /// `weight(t)/2 * |residual|^2`; the scalar logged as the dream term.
    pub value: f64,
}

/// Evaluates the dream gradient on one composite image.
///
/// Computes `z = E(composite)`, noises it with the frozen `(t, eps)` draw,
/// queries the noise prediction, and pulls `weight(t) * alpha(t) * (eps_hat -
/// eps)` back to pixel space. The noise predictor contributes no Jacobian.
pub fn dream_pixel_grad(
    composite: &RasterImage,
    caption: &str,
    model: &dyn ScoreModel,
    t: f64,
    eps: &Latent,
    mode: LatentGradMode,
) -> Result<DreamGradSample> {
    let z = model.encode_image(composite)?;
    if z.shape() != eps.shape() {
        return Err(Error::shape(
            format!("{:?}", z.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    let schedule = model.schedule();
    let z_t = add_noise(&z, eps, t, schedule)?;
    let emb = model.encode_text(caption)?;
    let eps_hat = model.predict_noise(&z_t, &emb, t)?;
    let residual = Latent::new(&eps_hat.values - &eps.values, z.factor)?;

    let w = schedule.weight(t);
    let a = schedule.alpha(t);
    let pulled = match mode {
        LatentGradMode::ThroughEncoder => model.encode_image_vjp(composite, &residual)?,
        LatentGradMode::NearestPixel => nearest_pixel_pullback(composite, &residual)?,
    };
    let pixel_grad = pulled * (w * a);
    let value = 0.5 * w * residual.values.iter().map(|v| v * v).sum::<f64>();

    Ok(DreamGradSample {
        t,
        eps: eps.clone(),
        residual,
        pixel_grad,
        value,
    })
}

/// Broadcasts each latent cell over its `f x f` pixel block. The first three
/// latent channels map to RGB; any extra channels are spread evenly.
fn nearest_pixel_pullback(image: &RasterImage, residual: &Latent) -> Result<Array3<f64>> {
    let (h, w) = (image.height(), image.width());
    let [lh, lw, lc] = residual.shape();
    let f = residual.factor;
    if lh * f != h || lw * f != w {
        return Err(Error::shape(
            format!("{h} x {w} / factor {f}"),
            format!("{lh} x {lw}"),
        ));
    }
    let mut grad = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let (bi, bj) = (i / f, j / f);
            for c in 0..3 {
                let mut v = if c < lc { residual.values[[bi, bj, c]] } else { 0.0 };
                for extra in 3..lc {
                    v += residual.values[[bi, bj, extra]] / 3.0;
                }
                grad[[i, j, c]] = v;
            }
        }
    }
    Ok(grad)
}

/// Chains a composite-space gradient onto one mask plane:
/// `sum_c pixel_grad[., ., c] * (image - background)[., ., c]`.
pub fn composite_mask_grad(
    pixel_grad: &Array3<f64>,
    image: &RasterImage,
    background: &UniformBackground,
) -> Result<Array2<f64>> {
    let (h, w) = (image.height(), image.width());
    if pixel_grad.shape() != [h, w, 3] {
        return Err(Error::shape(
            format!("{h} x {w} x 3"),
            format!("{:?}", pixel_grad.shape()),
        ));
    }
    let mut grad = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for c in 0..3 {
                acc += pixel_grad[[i, j, c]] * (image.pixels[[i, j, c]] - background.color[c]);
            }
            grad[[i, j]] = acc;
        }
    }
    Ok(grad)
}

/// Chains one dream sample all the way onto the mask parameters.
///
/// `head` names the mask plane whose composite the sample was taken from;
/// accumulation over `(k, j, t, eps)` samples is the caller's job. The
/// gradient depends on the sample's stored residual only — the score model
/// is not consulted again.
pub fn dream_param_grad(
    sample: &DreamGradSample,
    image: &RasterImage,
    background: &UniformBackground,
    params: &MaskParams,
    head: usize,
) -> Result<MaskParamGrad> {
    if head >= params.k() {
        return Err(Error::invalid(format!(
            "head {head} out of range for k = {}",
            params.k()
        )));
    }
    let plane = composite_mask_grad(&sample.pixel_grad, image, background)?;
    let (h, w) = (image.height(), image.width());
    let mut upstream = Array3::zeros((params.k(), h, w));
    upstream
        .index_axis_mut(ndarray::Axis(0), head)
        .assign(&plane);
    params.raster_vjp(h, w, &upstream)
}

/// Sum of every mask entry (Gravity). The gradient is 1 per entry.
pub fn gravity_loss(masks: &AlphaMaskStack) -> f64 {
    masks.alphas.sum()
}

/// Pairwise pointwise overlap: `sum_pixels sum_{k<k'} y_k * y_k'`.
/// Zero when `k = 1` or when supports are disjoint.
pub fn intersection_loss(masks: &AlphaMaskStack) -> f64 {
    let k = masks.k();
    let mut total = 0.0;
    for a in 0..k {
        for b in (a + 1)..k {
            total += (&masks.plane(a) * &masks.plane(b)).sum();
        }
    }
    total
}

/// Gradient of [`intersection_loss`] with respect to each mask entry:
/// `d/dy_k = sum_{k' != k} y_k'`.
pub fn intersection_grad(masks: &AlphaMaskStack) -> Array3<f64> {
    let k = masks.k();
    let (h, w) = (masks.height(), masks.width());
    let mut grad = Array3::zeros((k, h, w));
    if k < 2 {
        return grad;
    }
    let sum_all = masks.alphas.sum_axis(ndarray::Axis(0));
    for head in 0..k {
        let others = &sum_all - &masks.plane(head);
        grad.index_axis_mut(ndarray::Axis(0), head).assign(&others);
    }
    debug_assert_eq!(grad.shape(), [k, h, w]);
    grad
}

/// Weights of the three objective terms. The printed objective is their
/// plain sum, so everything defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dream: f64,
    pub gravity: f64,
    pub intersection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dream: 1.0,
            gravity: 1.0,
            intersection: 1.0,
        }
    }
}

/// Total objective value: `w_d * L_cd + w_g * L_g + w_i * L_i`, with the
/// intersection term dropped unless enabled (it only applies to object
/// segmentation, not referring segmentation).
pub fn total_objective(
    dream: f64,
    gravity: f64,
    intersection: f64,
    weights: &LossWeights,
    intersection_enabled: bool,
) -> f64 {
    let i = if intersection_enabled {
        weights.intersection * intersection
    } else {
        0.0
    };
    weights.dream * dream + weights.gravity * gravity + i
}

/// Assembles the combined upstream gradient on the mask stack from the
/// accumulated dream gradient and the auxiliary terms. `gravity_normalized`
/// divides the gravity gradient by `H * W` (its sum-scale otherwise grows
/// with resolution).
pub fn combined_mask_gradient(
    dream_upstream: &Array3<f64>,
    masks: &AlphaMaskStack,
    weights: &LossWeights,
    intersection_enabled: bool,
    gravity_normalized: bool,
) -> Result<Array3<f64>> {
    if dream_upstream.shape() != masks.alphas.shape() {
        return Err(Error::shape(
            format!("{:?}", masks.alphas.shape()),
            format!("{:?}", dream_upstream.shape()),
        ));
    }
    let gravity_per_entry = if gravity_normalized {
        weights.gravity / (masks.height() * masks.width()) as f64
    } else {
        weights.gravity
    };
    let mut grad = dream_upstream * weights.dream + gravity_per_entry;
    if intersection_enabled && masks.k() > 1 {
        grad += &(intersection_grad(masks) * weights.intersection);
    }
    Ok(grad)
}
