//! The composite-grid experiment: N learnable foregrounds with their alpha
//! masks (one shared network per foreground, four output heads: RGB +
//! alpha) overlaid on M learnable backgrounds (three heads), every cell
//! optimized with the dream loss on its combined caption. Unlike the
//! segmentation loop, everything here is learnable.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::loss::dream_pixel_grad;
use crate::mask::{init_fourier_params, MaskParams};
use crate::optim::{IterationRecord, OptimConfig, OptimTrace};
use crate::raster::RasterImage;
use crate::score::{Latent, ScoreModel};
use crate::synth::fill_template;

/// Layout of a grid run.
#[derive(Debug, Clone)]
pub struct GridExperimentSpec {
    pub fg_prompts: Vec<String>,
    pub bg_prompts: Vec<String>,
    /// Caption template with `{fg}` and `{bg}` placeholders.
    pub template: String,
    pub height: usize,
    pub width: usize,
}

impl GridExperimentSpec {
    fn validate(&self) -> Result<()> {
        if self.fg_prompts.is_empty() || self.bg_prompts.is_empty() {
            return Err(Error::invalid("need at least one foreground and one background prompt"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        Ok(())
    }
}

/// Learned grid contents.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub foregrounds: Vec<RasterImage>,
    pub backgrounds: Vec<RasterImage>,
    pub alphas: Vec<Array2<f64>>,
    /// `composites[n][m]` pairs foreground n with background m.
    pub composites: Vec<Vec<RasterImage>>,
    pub captions: Vec<Vec<String>>,
    pub trace: OptimTrace,
}

/// Heads of the shared foreground network: RGB + alpha.
const FG_HEADS: usize = 4;
/// Heads of a background network: RGB.
const BG_HEADS: usize = 3;

struct GridState {
    fg_nets: Vec<MaskParams>,
    bg_nets: Vec<MaskParams>,
}

impl GridState {
    fn init(spec: &GridExperimentSpec, config: &OptimConfig) -> Result<Self> {
        let (h, w) = (spec.height, spec.width);
        let fg_nets = (0..spec.fg_prompts.len())
            .map(|n| {
                Ok(MaskParams::Fourier(init_fourier_params(
                    FG_HEADS,
                    h,
                    w,
                    &config.repr,
                    config.seed.wrapping_add(n as u64),
                )?))
            })
            .collect::<Result<Vec<_>>>()?;
        let bg_nets = (0..spec.bg_prompts.len())
            .map(|m| {
                Ok(MaskParams::Fourier(init_fourier_params(
                    BG_HEADS,
                    h,
                    w,
                    &config.repr,
                    config.seed.wrapping_add(1000 + m as u64),
                )?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fg_nets, bg_nets })
    }
}

fn cell_composite(fg: &Array3<f64>, bg: &Array3<f64>, h: usize, w: usize) -> Result<RasterImage> {
    let mut pixels = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let a = fg[[3, i, j]];
            for c in 0..3 {
                pixels[[i, j, c]] =
                    (a * fg[[c, i, j]] + (1.0 - a) * bg[[c, i, j]]).clamp(0.0, 1.0);
            }
        }
    }
    RasterImage::new(pixels)
}

/// Optimizes the full grid. Deterministic given `(spec, model, config.seed)`.
pub fn run_grid_experiment(
    spec: &GridExperimentSpec,
    model: &dyn ScoreModel,
    config: &OptimConfig,
) -> Result<GridResult> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let latent_shape = model.latent_shape(h, w)?;
    let (n_fg, n_bg) = (spec.fg_prompts.len(), spec.bg_prompts.len());

    let captions: Vec<Vec<String>> = spec
        .fg_prompts
        .iter()
        .map(|f| {
            spec.bg_prompts
                .iter()
                .map(|b| fill_template(&spec.template, f, b))
                .collect()
        })
        .collect();

    let mut state = GridState::init(spec, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = OptimTrace::default();

    for iter in 0..config.iterations {
        let started = Instant::now();
        let n_draws = if config.per_composite_draws { n_fg * n_bg } else { 1 };
        let ts: Vec<f64> = (0..n_draws)
            .map(|_| config.t_min + (config.t_max - config.t_min) * rng.random::<f64>())
            .collect();
        let epss: Vec<Latent> = (0..n_draws)
            .map(|_| {
                Latent::new(
                    Array3::from_shape_fn(
                        (latent_shape[0], latent_shape[1], latent_shape[2]),
                        |_| StandardNormal.sample(&mut rng),
                    ),
                    model.downsample_factor(),
                )
            })
            .collect::<Result<_>>()?;

        let mut fg_rasters = Vec::with_capacity(n_fg);
        let mut fg_tapes = Vec::with_capacity(n_fg);
        for net in &state.fg_nets {
            let (r, t) = net.rasterize_with_tape(h, w)?;
            fg_rasters.push(r);
            fg_tapes.push(t);
        }
        let mut bg_rasters = Vec::with_capacity(n_bg);
        let mut bg_tapes = Vec::with_capacity(n_bg);
        for net in &state.bg_nets {
            let (r, t) = net.rasterize_with_tape(h, w)?;
            bg_rasters.push(r);
            bg_tapes.push(t);
        }

        let mut fg_upstreams = vec![Array3::<f64>::zeros((FG_HEADS, h, w)); n_fg];
        let mut bg_upstreams = vec![Array3::<f64>::zeros((BG_HEADS, h, w)); n_bg];
        let mut dream_value = 0.0;
        let mut variance_acc = 0.0;

        for n in 0..n_fg {
            let fg = &fg_rasters[n].alphas;
            for m in 0..n_bg {
                let bg = &bg_rasters[m].alphas;
                let comp = cell_composite(fg, bg, h, w)?;
                variance_acc += comp.pixel_variance();
                let draw = if config.per_composite_draws { n * n_bg + m } else { 0 };
                let sample = dream_pixel_grad(
                    &comp,
                    &captions[n][m],
                    model,
                    ts[draw],
                    &epss[draw],
                    config.latent_grad_mode,
                )?;
                dream_value += sample.value;
                let g = &sample.pixel_grad;
                for i in 0..h {
                    for j in 0..w {
                        let a = fg[[3, i, j]];
                        let mut alpha_grad = 0.0;
                        for c in 0..3 {
                            let gc = g[[i, j, c]];
                            fg_upstreams[n][[c, i, j]] += a * gc;
                            bg_upstreams[m][[c, i, j]] += (1.0 - a) * gc;
                            alpha_grad += gc * (fg[[c, i, j]] - bg[[c, i, j]]);
                        }
                        fg_upstreams[n][[3, i, j]] += alpha_grad;
                    }
                }
            }
        }

        for n in 0..n_fg {
            let grad = state.fg_nets[n].vjp_with_tape(&fg_tapes[n], &fg_upstreams[n])?;
            if !grad.all_finite() {
                return Err(Error::NonFiniteGradient {
                    iteration: iter + 1,
                    detail: format!("foreground net {n}"),
                });
            }
            state.fg_nets[n].sgd_step(&grad, config.learning_rate)?;
        }
        for m in 0..n_bg {
            let grad = state.bg_nets[m].vjp_with_tape(&bg_tapes[m], &bg_upstreams[m])?;
            if !grad.all_finite() {
                return Err(Error::NonFiniteGradient {
                    iteration: iter + 1,
                    detail: format!("background net {m}"),
                });
            }
            state.bg_nets[m].sgd_step(&grad, config.learning_rate)?;
        }

        trace.records.push(IterationRecord {
            iteration: iter + 1,
            loss_total: dream_value,
            loss_dream: dream_value,
            loss_gravity: 0.0,
            loss_intersection: 0.0,
            mask_variance: variance_acc / (n_fg * n_bg) as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    // Final readout.
    let mut foregrounds = Vec::with_capacity(n_fg);
    let mut alphas = Vec::with_capacity(n_fg);
    let mut fg_final = Vec::with_capacity(n_fg);
    for net in &state.fg_nets {
        let r = net.rasterize(h, w)?;
        let mut pixels = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    pixels[[i, j, c]] = r.alphas[[c, i, j]];
                }
            }
        }
        foregrounds.push(RasterImage::new(pixels)?);
        alphas.push(
            r.alphas
                .index_axis(ndarray::Axis(0), 3)
                .to_owned(),
        );
        fg_final.push(r);
    }
    let mut backgrounds = Vec::with_capacity(n_bg);
    let mut bg_final = Vec::with_capacity(n_bg);
    for net in &state.bg_nets {
        let r = net.rasterize(h, w)?;
        let mut pixels = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    pixels[[i, j, c]] = r.alphas[[c, i, j]];
                }
            }
        }
        backgrounds.push(RasterImage::new(pixels)?);
        bg_final.push(r);
    }
    let mut composites = Vec::with_capacity(n_fg);
    for n in 0..n_fg {
        let mut row = Vec::with_capacity(n_bg);
        for m in 0..n_bg {
            row.push(cell_composite(&fg_final[n].alphas, &bg_final[m].alphas, h, w)?);
        }
        composites.push(row);
    }

    Ok(GridResult {
        foregrounds,
        backgrounds,
        alphas,
        composites,
        captions,
        trace,
    })
}

/// Root-mean-square difference between two images; the grid experiment's
/// convergence metric.
pub fn image_rmse(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.pixels.shape() != b.pixels.shape() {
        return Err(Error::shape(
            format!("{:?}", a.pixels.shape()),
            format!("{:?}", b.pixels.shape()),
        ));
    }
    let n = a.pixels.len() as f64;
    let mse = (&a.pixels - &b.pixels).iter().map(|d| d * d).sum::<f64>() / n;
    Ok(mse.sqrt())
}
