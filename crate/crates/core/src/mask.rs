//! Learnable alpha-mask representations.
//!
//! The primary representation is an implicit neural function: a regular grid
//! of normalized pixel-center coordinates is lifted to random Fourier
//! features and passed through a small fully-connected network with one
//! output head per mask. A direct per-pixel logit grid is kept alongside it
//! as the ablation baseline.
//!
//! Both representations rasterize to an [`AlphaMaskStack`] and expose an
//! exact vector-Jacobian product so the optimizer can chain upstream mask
//! gradients back onto the parameters.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::AlphaMaskStack;

/// Number of fully-connected layers in the implicit network.
pub const MLP_LAYERS: usize = 4;

/// Shape of the implicit representation, all knobs overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationConfig {
    /// Number of random Fourier frequencies (each contributes a sin and a cos
    /// feature). Zero degenerates to a bias-only constant function.
    pub n_freq: usize,
    /// Standard deviation of the Gaussian the frequencies are drawn from,
    /// in cycles per unit coordinate.
    pub fourier_scale: f64,
    /// Width of the three hidden layers.
    pub hidden_width: usize,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            n_freq: 256,
            fourier_scale: 10.0,
            hidden_width: 256,
        }
    }
}

/// One fully-connected layer, `weight: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradient with the same shape as a [`DenseLayer`].
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of the implicit Fourier-feature mask network.
///
/// All entries — the frequency matrix included — are treated as learnable.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMaskParams {
    /// `n_freq x 2` frequencies in cycles per unit coordinate.
    pub frequencies: Array2<f64>,
    /// The four fully-connected layers; the last has `k` output rows.
    pub layers: Vec<DenseLayer>,
    /// Number of mask heads.
    pub k: usize,
    /// Scale the frequencies were drawn with (kept for checkpoint headers).
    pub fourier_scale: f64,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

/// Gradient with the same layout as [`FourierMaskParams`].
#[derive(Debug, Clone)]
pub struct FourierParamGrad {
    pub frequencies: Array2<f64>,
    pub layers: Vec<DenseGrad>,
}

/// Direct per-pixel mask parameterization: a `k x H x W` grid of
/// pre-activation logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMaskParams {
    pub logits: Array3<f64>,
}

/// Either mask representation behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskParams {
    Fourier(FourierMaskParams),
    Pixel(PixelMaskParams),
}

/// Parameter gradient matching a [`MaskParams`] variant.
#[derive(Debug, Clone)]
pub enum MaskParamGrad {
    Fourier(FourierParamGrad),
    Pixel(Array3<f64>),
}

/// Cached forward activations, consumed by the backward pass.
pub enum MaskTape {
    Fourier(FourierTape),
    Pixel(Array3<f64>),
}

/// Forward cache for the implicit network.
pub struct FourierTape {
    height: usize,
    width: usize,
    coords: Array2<f64>,
    sin: Array2<f64>,
    cos: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    out: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Initializes the implicit mask network.
///
/// Frequencies are drawn from `N(0, fourier_scale^2)`; layer weights from
/// `N(0, 1/fan_in)`; biases start at zero. The same `(seed, config)` pair
/// reproduces the parameters bit for bit. `height`/`width` only validate the
/// grid the caller intends to rasterize on — the representation itself is
/// resolution-free.
pub fn init_fourier_params(
    k: usize,
    height: usize,
    width: usize,
    config: &RepresentationConfig,
    seed: u64,
) -> Result<FourierMaskParams> {
    if k == 0 {
        return Err(Error::invalid("mask count k must be >= 1"));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("raster dimensions must be positive"));
    }
    if !(config.fourier_scale > 0.0) {
        return Err(Error::invalid("fourier_scale must be > 0"));
    }
    if config.hidden_width == 0 {
        return Err(Error::invalid("hidden width must be >= 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let frequencies = Array2::from_shape_fn((config.n_freq, 2), |_| {
        let z: f64 = normal.sample(&mut rng);
        z * config.fourier_scale
    });

    let widths = layer_widths(config, k);
    let mut layers = Vec::with_capacity(MLP_LAYERS);
    for (fan_in, fan_out) in widths {
        let std = if fan_in > 0 {
            (1.0 / fan_in as f64).sqrt()
        } else {
            0.0
        };
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
            let z: f64 = normal.sample(&mut rng);
            z * std
        });
        layers.push(DenseLayer {
            weight,
            bias: Array1::zeros(fan_out),
        });
    }

    Ok(FourierMaskParams {
        frequencies,
        layers,
        k,
        fourier_scale: config.fourier_scale,
        seed,
    })
}

fn layer_widths(config: &RepresentationConfig, k: usize) -> [(usize, usize); MLP_LAYERS] {
    let h = config.hidden_width;
    [(2 * config.n_freq, h), (h, h), (h, h), (h, k)]
}

/// Normalized pixel-center coordinate grid, `(H*W) x 2` rows of `(u, v)`
/// with `u = (row + 0.5)/H`, `v = (col + 0.5)/W`.
fn coordinate_grid(height: usize, width: usize) -> Array2<f64> {
    let mut coords = Array2::zeros((height * width, 2));
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            coords[[p, 0]] = (i as f64 + 0.5) / height as f64;
            coords[[p, 1]] = (j as f64 + 0.5) / width as f64;
        }
    }
    coords
}

impl FourierMaskParams {
    /// Evaluates the network on the pixel grid.
    pub fn rasterize(&self, height: usize, width: usize) -> Result<AlphaMaskStack> {
        self.rasterize_with_tape(height, width).map(|(s, _)| s)
    }

    /// Evaluates the network, keeping the activations for [`Self::raster_vjp`].
    pub fn rasterize_with_tape(
        &self,
        height: usize,
        width: usize,
    ) -> Result<(AlphaMaskStack, FourierTape)> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        if self.layers.len() != MLP_LAYERS {
            return Err(Error::invalid(format!(
                "expected {MLP_LAYERS} layers, found {}",
                self.layers.len()
            )));
        }
        let coords = coordinate_grid(height, width);
        let angles = coords.dot(&self.frequencies.t()) * (2.0 * PI);
        let sin = angles.mapv(f64::sin);
        let cos = angles.mapv(f64::cos);

        let n = height * width;
        let n_freq = self.frequencies.shape()[0];
        let mut features = Array2::zeros((n, 2 * n_freq));
        features.slice_mut(ndarray::s![.., ..n_freq]).assign(&sin);
        features.slice_mut(ndarray::s![.., n_freq..]).assign(&cos);

        let mut hidden = Vec::with_capacity(MLP_LAYERS - 1);
        let mut x = features;
        for layer in &self.layers[..MLP_LAYERS - 1] {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            let h = z.mapv(f64::tanh);
            hidden.push(h.clone());
            x = h;
        }
        let last = &self.layers[MLP_LAYERS - 1];
        let mut z = x.dot(&last.weight.t());
        z += &last.bias;
        let out = z.mapv(sigmoid);

        let mut alphas = Array3::zeros((self.k, height, width));
        for head in 0..self.k {
            for i in 0..height {
                for j in 0..width {
                    alphas[[head, i, j]] = out[[i * width + j, head]];
                }
            }
        }

        let tape = FourierTape {
            height,
            width,
            coords,
            sin,
            cos,
            hidden,
            out,
        };
        Ok((AlphaMaskStack::new(alphas)?, tape))
    }

    /// Pulls an upstream `k x H x W` mask gradient back onto the parameters.
    pub fn raster_vjp(&self, tape: &FourierTape, upstream: &Array3<f64>) -> Result<FourierParamGrad> {
        let (h, w) = (tape.height, tape.width);
        if upstream.shape() != [self.k, h, w] {
            return Err(Error::shape(
                format!("{} x {h} x {w}", self.k),
                format!("{:?}", upstream.shape()),
            ));
        }
        let n = h * w;
        let mut d_out = Array2::zeros((n, self.k));
        for head in 0..self.k {
            for i in 0..h {
                for j in 0..w {
                    d_out[[i * w + j, head]] = upstream[[head, i, j]];
                }
            }
        }

        // Sigmoid head.
        let mut delta = &d_out * &tape.out.mapv(|y| y * (1.0 - y));

        let features = feature_matrix(&tape.sin, &tape.cos);
        let mut layer_grads: Vec<DenseGrad> = Vec::with_capacity(MLP_LAYERS);
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input: &Array2<f64> = if idx == 0 {
                &features
            } else {
                &tape.hidden[idx - 1]
            };
            let d_weight = delta.t().dot(input);
            let d_bias = delta.sum_axis(Axis(0));
            layer_grads.push(DenseGrad {
                weight: d_weight,
                bias: d_bias,
            });
            if idx == 0 {
                // Continue into the feature matrix for the frequency gradient.
                delta = delta.dot(&layer.weight);
                break;
            }
            let d_h = delta.dot(&layer.weight);
            delta = &d_h * &tape.hidden[idx - 1].mapv(|t| 1.0 - t * t);
        }
        layer_grads.reverse();

        // delta is now the gradient on [sin | cos] features.
        let n_freq = self.frequencies.shape()[0];
        let d_sin = delta.slice(ndarray::s![.., ..n_freq]);
        let d_cos = delta.slice(ndarray::s![.., n_freq..]);
        let d_angles = (&d_sin * &tape.cos - &d_cos * &tape.sin) * (2.0 * PI);
        let d_frequencies = d_angles.t().dot(&tape.coords);

        Ok(FourierParamGrad {
            frequencies: d_frequencies,
            layers: layer_grads,
        })
    }

    /// Plain gradient-descent update on every parameter.
    pub fn sgd_step(&mut self, grad: &FourierParamGrad, lr: f64) {
        self.frequencies.scaled_add(-lr, &grad.frequencies);
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            layer.weight.scaled_add(-lr, &g.weight);
            layer.bias.scaled_add(-lr, &g.bias);
        }
    }
}

fn feature_matrix(sin: &Array2<f64>, cos: &Array2<f64>) -> Array2<f64> {
    let (n, n_freq) = (sin.shape()[0], sin.shape()[1]);
    let mut features = Array2::zeros((n, 2 * n_freq));
    features.slice_mut(ndarray::s![.., ..n_freq]).assign(sin);
    features.slice_mut(ndarray::s![.., n_freq..]).assign(cos);
    features
}

impl PixelMaskParams {
    /// All-zero logits (rasterizes to a uniform 0.5 mask).
    pub fn zeros(k: usize, height: usize, width: usize) -> Result<Self> {
        if k == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("pixel mask dimensions must be positive"));
        }
        Ok(Self {
            logits: Array3::zeros((k, height, width)),
        })
    }

    /// Seeded standard-normal logits; the stochastic counterpart of
    /// [`init_fourier_params`] for the ablation runs.
    pub fn random(k: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(k, height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        for v in p.logits.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Result<AlphaMaskStack> {
        self.check_dims(height, width)?;
        AlphaMaskStack::new(self.logits.mapv(sigmoid))
    }

    pub fn raster_vjp(&self, upstream: &Array3<f64>) -> Result<Array3<f64>> {
        if upstream.shape() != self.logits.shape() {
            return Err(Error::shape(
                format!("{:?}", self.logits.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let y = self.logits.mapv(sigmoid);
        Ok(upstream * &y.mapv(|v| v * (1.0 - v)))
    }

    pub fn sgd_step(&mut self, grad: &Array3<f64>, lr: f64) {
        self.logits.scaled_add(-lr, grad);
    }

    fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let s = self.logits.shape();
        if s[1] != height || s[2] != width {
            return Err(Error::shape(
                format!("{} x {}", s[1], s[2]),
                format!("{height} x {width}"),
            ));
        }
        Ok(())
    }
}

impl MaskParams {
    pub fn k(&self) -> usize {
        match self {
            MaskParams::Fourier(p) => p.k,
            MaskParams::Pixel(p) => p.k(),
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Result<AlphaMaskStack> {
        match self {
            MaskParams::Fourier(p) => p.rasterize(height, width),
            MaskParams::Pixel(p) => p.rasterize(height, width),
        }
    }

    pub fn rasterize_with_tape(
        &self,
        height: usize,
        width: usize,
    ) -> Result<(AlphaMaskStack, MaskTape)> {
        match self {
            MaskParams::Fourier(p) => {
                let (stack, tape) = p.rasterize_with_tape(height, width)?;
                Ok((stack, MaskTape::Fourier(tape)))
            }
            MaskParams::Pixel(p) => {
                let stack = p.rasterize(height, width)?;
                let raster = stack.alphas.clone();
                Ok((stack, MaskTape::Pixel(raster)))
            }
        }
    }

    pub fn vjp_with_tape(&self, tape: &MaskTape, upstream: &Array3<f64>) -> Result<MaskParamGrad> {
        match (self, tape) {
            (MaskParams::Fourier(p), MaskTape::Fourier(t)) => {
                Ok(MaskParamGrad::Fourier(p.raster_vjp(t, upstream)?))
            }
            (MaskParams::Pixel(p), MaskTape::Pixel(_)) => {
                Ok(MaskParamGrad::Pixel(p.raster_vjp(upstream)?))
            }
            _ => Err(Error::invalid("tape does not match parameter kind")),
        }
    }

    /// Rasterize + backward in one call; used where no tape is cached.
    pub fn raster_vjp(
        &self,
        height: usize,
        width: usize,
        upstream: &Array3<f64>,
    ) -> Result<MaskParamGrad> {
        let (_, tape) = self.rasterize_with_tape(height, width)?;
        self.vjp_with_tape(&tape, upstream)
    }

    pub fn sgd_step(&mut self, grad: &MaskParamGrad, lr: f64) -> Result<()> {
        match (self, grad) {
            (MaskParams::Fourier(p), MaskParamGrad::Fourier(g)) => {
                p.sgd_step(g, lr);
                Ok(())
            }
            (MaskParams::Pixel(p), MaskParamGrad::Pixel(g)) => {
                p.sgd_step(g, lr);
                Ok(())
            }
            _ => Err(Error::invalid("gradient does not match parameter kind")),
        }
    }

    /// Flattened view of every parameter, in checkpoint order.
    pub fn to_flat_vec(&self) -> Vec<f64> {
        match self {
            MaskParams::Fourier(p) => {
                let mut v: Vec<f64> = p.frequencies.iter().copied().collect();
                for layer in &p.layers {
                    v.extend(layer.weight.iter());
                    v.extend(layer.bias.iter());
                }
                v
            }
            MaskParams::Pixel(p) => p.logits.iter().copied().collect(),
        }
    }

    /// Overwrites every parameter from a flat slice in checkpoint order.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::invalid(format!(
                "flat parameter length {} does not match {expected}",
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        match self {
            MaskParams::Fourier(p) => {
                for v in p.frequencies.iter_mut() {
                    *v = it.next().unwrap();
                }
                for layer in p.layers.iter_mut() {
                    for v in layer.weight.iter_mut() {
                        *v = it.next().unwrap();
                    }
                    for v in layer.bias.iter_mut() {
                        *v = it.next().unwrap();
                    }
                }
            }
            MaskParams::Pixel(p) => {
                for v in p.logits.iter_mut() {
                    *v = it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self {
            MaskParams::Fourier(p) => {
                p.frequencies.len()
                    + p.layers
                        .iter()
                        .map(|l| l.weight.len() + l.bias.len())
                        .sum::<usize>()
            }
            MaskParams::Pixel(p) => p.logits.len(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat_vec().iter().all(|v| v.is_finite())
    }
}

/// Gradient counterpart of [`MaskParams::to_flat_vec`].
impl MaskParamGrad {
    pub fn to_flat_vec(&self) -> Vec<f64> {
        match self {
            MaskParamGrad::Fourier(g) => {
                let mut v: Vec<f64> = g.frequencies.iter().copied().collect();
                for layer in &g.layers {
                    v.extend(layer.weight.iter());
                    v.extend(layer.bias.iter());
                }
                v
            }
            MaskParamGrad::Pixel(g) => g.iter().copied().collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            MaskParamGrad::Fourier(g) => {
                g.frequencies.iter().all(|v| v.is_finite())
                    && g.layers
                        .iter()
                        .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
            }
            MaskParamGrad::Pixel(g) => g.iter().all(|v| v.is_finite()),
        }
    }
}

/// JSON checkpoint header describing the binary parameter blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub k: usize,
    pub seed: u64,
    pub fourier_scale: f64,
    /// `n_freq x 2` for the Fourier representation, `k x H x W` for pixel.
    pub shapes: Vec<Vec<usize>>,
    pub dtype: String,
    pub values: usize,
}

impl MaskParams {
    /// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f64 blob).
    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let header = self.checkpoint_header();
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let file = std::fs::File::create(&json_path)?;
        serde_json::to_writer_pretty(file, &header)?;

        let flat = self.to_flat_vec();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in &flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(&bin_path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Reconstructs parameters from a `save_checkpoint` pair.
    pub fn load_checkpoint(stem: &Path) -> Result<Self> {
        let header: CheckpointHeader =
            serde_json::from_reader(std::fs::File::open(stem.with_extension("json"))?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() != header.values * 8 {
            return Err(Error::invalid(format!(
                "checkpoint blob holds {} bytes, header says {} values",
                bytes.len(),
                header.values
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut params = match header.kind.as_str() {
            "fourier" => {
                if header.shapes.len() != 1 + 2 * MLP_LAYERS {
                    return Err(Error::invalid("fourier checkpoint header has wrong shape list"));
                }
                let freq_shape = &header.shapes[0];
                let frequencies = Array2::zeros((freq_shape[0], freq_shape[1]));
                let mut layers = Vec::with_capacity(MLP_LAYERS);
                for l in 0..MLP_LAYERS {
                    let ws = &header.shapes[1 + 2 * l];
                    let bs = &header.shapes[2 + 2 * l];
                    layers.push(DenseLayer {
                        weight: Array2::zeros((ws[0], ws[1])),
                        bias: Array1::zeros(bs[0]),
                    });
                }
                MaskParams::Fourier(FourierMaskParams {
                    frequencies,
                    layers,
                    k: header.k,
                    fourier_scale: header.fourier_scale,
                    seed: header.seed,
                })
            }
            "pixel" => {
                let s = &header.shapes[0];
                MaskParams::Pixel(PixelMaskParams {
                    logits: Array3::zeros((s[0], s[1], s[2])),
                })
            }
            other => return Err(Error::UnknownKind(other.to_string())),
        };
        params.set_from_flat(&flat)?;
        Ok(params)
    }

    fn checkpoint_header(&self) -> CheckpointHeader {
        match self {
            MaskParams::Fourier(p) => {
                let mut shapes = vec![p.frequencies.shape().to_vec()];
                for layer in &p.layers {
                    shapes.push(layer.weight.shape().to_vec());
                    shapes.push(layer.bias.shape().to_vec());
                }
                CheckpointHeader {
                    kind: "fourier".into(),
                    k: p.k,
                    seed: p.seed,
                    fourier_scale: p.fourier_scale,
                    shapes,
                    dtype: "f64-le".into(),
                    values: MaskParams::Fourier(p.clone()).param_count(),
                }
            }
            MaskParams::Pixel(p) => CheckpointHeader {
                kind: "pixel".into(),
                k: p.k(),
                seed: 0,
                fourier_scale: 0.0,
                shapes: vec![p.logits.shape().to_vec()],
                dtype: "f64-le".into(),
                values: p.logits.len(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RepresentationConfig {
        RepresentationConfig {
            n_freq: 4,
            fourier_scale: 3.0,
            hidden_width: 8,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_fourier_params(1, 64, 64, &RepresentationConfig::default(), 7).unwrap();
        let b = init_fourier_params(1, 64, 64, &RepresentationConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_fourier_params(1, 64, 64, &RepresentationConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn final_layer_width_tracks_k() {
        let p = init_fourier_params(3, 16, 16, &small_config(), 1).unwrap();
        assert_eq!(p.layers.last().unwrap().weight.shape()[0], 3);
        assert_eq!(p.layers.len(), MLP_LAYERS);
    }

    #[test]
    fn rejects_degenerate_dimensions() {
        assert!(init_fourier_params(0, 16, 16, &small_config(), 1).is_err());
        assert!(init_fourier_params(1, 0, 16, &small_config(), 1).is_err());
        let mut cfg = small_config();
        cfg.fourier_scale = 0.0;
        assert!(init_fourier_params(1, 16, 16, &cfg, 1).is_err());
    }

    #[test]
    fn zero_frequencies_rasterize_to_a_constant() {
        let cfg = RepresentationConfig {
            n_freq: 0,
            fourier_scale: 1.0,
            hidden_width: 8,
        };
        let mut p = init_fourier_params(1, 8, 8, &cfg, 3).unwrap();
        // Give the head a non-trivial bias so the analytic value is not 0.5.
        p.layers[3].bias[0] = 0.7;

        // Oracle: evaluate the network by hand with an empty feature vector.
        // Zero-width first layer leaves only the bias chain.
        let mut h = p.layers[0].bias.mapv(f64::tanh);
        for layer in &p.layers[1..3] {
            h = (layer.weight.dot(&h) + &layer.bias).mapv(f64::tanh);
        }
        let z = p.layers[3].weight.dot(&h) + &p.layers[3].bias;
        let expected = sigmoid(z[0]);

        let stack = p.rasterize(8, 8).unwrap();
        for v in stack.alphas.iter() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_zero_logits_rasterize_to_half() {
        let p = PixelMaskParams::zeros(2, 3, 3).unwrap();
        let stack = p.rasterize(3, 3).unwrap();
        for v in stack.alphas.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn rasterize_is_pure() {
        let p = init_fourier_params(2, 12, 10, &small_config(), 11).unwrap();
        let a = p.rasterize(12, 10).unwrap();
        let b = p.rasterize(12, 10).unwrap();
        assert_eq!(a.alphas, b.alphas);
    }

    #[test]
    fn outputs_stay_in_unit_range_for_wild_parameters() {
        let mut p = init_fourier_params(1, 8, 8, &small_config(), 5).unwrap();
        for layer in p.layers.iter_mut() {
            layer.weight.mapv_inplace(|v| v * 1e4);
            layer.bias.fill(-37.0);
        }
        let stack = p.rasterize(8, 8).unwrap();
        assert!(stack.alphas.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn head_weights_only_touch_their_channel() {
        let p = init_fourier_params(3, 9, 9, &small_config(), 2).unwrap();
        let base = p.rasterize(9, 9).unwrap();
        let mut q = p.clone();
        // Perturb only head 1 of the final layer.
        q.layers[3].weight.row_mut(1).mapv_inplace(|v| v + 0.5);
        q.layers[3].bias[1] += 0.25;
        let bumped = q.rasterize(9, 9).unwrap();
        assert_eq!(base.plane(0), bumped.plane(0));
        assert_eq!(base.plane(2), bumped.plane(2));
        assert_ne!(base.plane(1), bumped.plane(1));
    }

    /// Finite-difference check of the full parameter Jacobian on a 16x16
    /// raster: perturbation 1e-4, relative error < 1e-3 per parameter.
    #[test]
    fn vjp_matches_finite_differences() {
        let params = MaskParams::Fourier(init_fourier_params(2, 16, 16, &small_config(), 9).unwrap());
        fd_check(&params, 16, 16);
    }

    #[test]
    fn pixel_vjp_matches_finite_differences() {
        let params = MaskParams::Pixel(PixelMaskParams::random(1, 6, 5, 4).unwrap());
        fd_check(&params, 6, 5);
    }

    fn fd_check(params: &MaskParams, h: usize, w: usize) {
        // Scalar probe: <raster, u> for a fixed random upstream u.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let upstream = Array3::from_shape_fn((params.k(), h, w), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let probe = |p: &MaskParams| -> f64 {
            let stack = p.rasterize(h, w).unwrap();
            (&stack.alphas * &upstream).sum()
        };

        let analytic = params.raster_vjp(h, w, &upstream).unwrap().to_flat_vec();
        let flat = params.to_flat_vec();
        let eps = 1e-4;
        let mut worst = 0.0f64;
        for idx in 0..flat.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[idx] += eps;
            fm[idx] -= eps;
            plus.set_from_flat(&fp).unwrap();
            minus.set_from_flat(&fm).unwrap();
            let fd = (probe(&plus) - probe(&minus)) / (2.0 * eps);
            let denom = analytic[idx].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((fd - analytic[idx]).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("mask");
        let params = MaskParams::Fourier(init_fourier_params(2, 8, 8, &small_config(), 21).unwrap());
        params.save_checkpoint(&stem).unwrap();
        let loaded = MaskParams::load_checkpoint(&stem).unwrap();
        assert_eq!(params, loaded);

        let pix = MaskParams::Pixel(PixelMaskParams::random(1, 4, 4, 3).unwrap());
        let stem2 = dir.path().join("pix");
        pix.save_checkpoint(&stem2).unwrap();
        assert_eq!(pix, MaskParams::load_checkpoint(&stem2).unwrap());
    }
}
