//! Variance-preserving noise schedules over continuous time `t in [0, 1]`.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Selector for [`default_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    CosineVp,
    /// Variance linear in `t`: `alpha = sqrt(1 - t)`, `sigma = sqrt(t)`.
    LinearVp,
    /// The discrete schedule of the wrapped external checkpoint,
    /// interpolated onto `[0, 1]`.
    ExternalModelNative,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine-vp" => Ok(ScheduleKind::CosineVp),
            "linear-vp" => Ok(ScheduleKind::LinearVp),
            "external-model-native" => Ok(ScheduleKind::ExternalModelNative),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Per-timestep loss weight `w_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    /// `w_t = sigma(t)^2`; tames the `1/sigma` factor in the noise residual.
    SigmaSquared,
    /// `w_t = 1`.
    Uniform,
}

/// The functions `alpha(t)`, `sigma(t)`, `weight(t)` of a forward diffusion
/// process, under the variance-preserving convention
/// `alpha(t)^2 + sigma(t)^2 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    form: ScheduleForm,
    weight: WeightKind,
}

#[derive(Debug, Clone, PartialEq)]
enum ScheduleForm {
    Cosine,
    Linear,
    /// Cumulative alpha-bar table, linearly interpolated on `[0, 1]`.
    Discrete(Vec<f64>),
}

impl NoiseSchedule {
    pub fn cosine_vp() -> Self {
        Self {
            form: ScheduleForm::Cosine,
            weight: WeightKind::SigmaSquared,
        }
    }

    pub fn linear_vp() -> Self {
        Self {
            form: ScheduleForm::Linear,
            weight: WeightKind::SigmaSquared,
        }
    }

    /// Wraps a discrete cumulative `alpha_bar` table (decreasing, in (0, 1]).
    pub fn from_alpha_bar(table: Vec<f64>) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::invalid("alpha_bar table needs at least 2 entries"));
        }
        for pair in table.windows(2) {
            if !(pair[1] < pair[0]) {
                return Err(Error::invalid("alpha_bar table must be strictly decreasing"));
            }
        }
        if !table.iter().all(|v| v.is_finite() && *v > 0.0 && *v <= 1.0) {
            return Err(Error::invalid("alpha_bar entries must lie in (0, 1]"));
        }
        Ok(Self {
            form: ScheduleForm::Discrete(table),
            weight: WeightKind::SigmaSquared,
        })
    }

    /// Builds the alpha-bar table from a scaled-linear beta range, the
    /// convention common to latent diffusion checkpoints.
    pub fn from_scaled_linear_betas(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid("bad beta schedule parameters"));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut table = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for i in 0..steps {
            let b = s0 + (s1 - s0) * i as f64 / (steps - 1) as f64;
            acc *= 1.0 - b * b;
            table.push(acc);
        }
        Self::from_alpha_bar(table)
    }

    pub fn with_weight(mut self, weight: WeightKind) -> Self {
        self.weight = weight;
        self
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match &self.form {
            ScheduleForm::Cosine => (FRAC_PI_2 * t).cos(),
            ScheduleForm::Linear => (1.0 - t).max(0.0).sqrt(),
            ScheduleForm::Discrete(table) => interp(table, t).sqrt(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match &self.form {
            ScheduleForm::Cosine => (FRAC_PI_2 * t).sin(),
            ScheduleForm::Linear => t.max(0.0).sqrt(),
            ScheduleForm::Discrete(table) => (1.0 - interp(table, t)).sqrt(),
        }
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self.weight {
            WeightKind::SigmaSquared => self.sigma(t).powi(2),
            WeightKind::Uniform => 1.0,
        }
    }
}

fn interp(table: &[f64], t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    let pos = t * (table.len() - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= table.len() {
        return *table.last().unwrap();
    }
    let frac = pos - lo as f64;
    table[lo] * (1.0 - frac) + table[lo + 1] * frac
}

/// Standard scaled-linear beta range shipped as the external-native default.
const NATIVE_BETA_START: f64 = 0.00085;
const NATIVE_BETA_END: f64 = 0.012;
const NATIVE_STEPS: usize = 1000;

/// Returns the named schedule with the default `sigma^2` weighting.
pub fn default_schedule(kind: ScheduleKind) -> NoiseSchedule {
    match kind {
        ScheduleKind::CosineVp => NoiseSchedule::cosine_vp(),
        ScheduleKind::LinearVp => NoiseSchedule::linear_vp(),
        ScheduleKind::ExternalModelNative => {
            NoiseSchedule::from_scaled_linear_betas(NATIVE_BETA_START, NATIVE_BETA_END, NATIVE_STEPS)
                .expect("builtin beta range is valid")
        }
    }
}

/// Every schedule the crate ships, for blanket invariant tests.
pub fn all_schedule_kinds() -> [ScheduleKind; 3] {
    [
        ScheduleKind::CosineVp,
        ScheduleKind::LinearVp,
        ScheduleKind::ExternalModelNative,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_boundary_conditions() {
        let s = default_schedule(ScheduleKind::CosineVp);
        assert!((s.alpha(0.0) - 1.0).abs() < 1e-6);
        assert!(s.sigma(0.0).abs() < 1e-6);
    }

    #[test]
    fn variance_preserving_identity_on_dense_grid() {
        for kind in all_schedule_kinds() {
            let s = default_schedule(kind);
            for i in 0..100 {
                let t = i as f64 / 99.0;
                let sum = s.alpha(t).powi(2) + s.sigma(t).powi(2);
                assert!((sum - 1.0).abs() < 1e-6, "{kind:?} at t={t}: {sum}");
            }
        }
    }

    #[test]
    fn alpha_decreases_sigma_increases() {
        for kind in all_schedule_kinds() {
            let s = default_schedule(kind);
            let mut prev_a = f64::INFINITY;
            let mut prev_s = f64::NEG_INFINITY;
            for i in 0..50 {
                let t = i as f64 / 49.0;
                let a = s.alpha(t);
                let sg = s.sigma(t);
                assert!(a <= prev_a + 1e-12, "{kind:?} alpha not decreasing");
                assert!(sg >= prev_s - 1e-12, "{kind:?} sigma not increasing");
                prev_a = a;
                prev_s = sg;
            }
        }
    }

    #[test]
    fn weight_positive_inside_working_range() {
        for kind in all_schedule_kinds() {
            let s = default_schedule(kind);
            for i in 0..=96 {
                let t = 0.02 + 0.96 * i as f64 / 96.0;
                assert!(s.weight(t) > 0.0, "{kind:?} weight at t={t}");
            }
        }
    }

    #[test]
    fn uniform_weight_option() {
        let s = NoiseSchedule::cosine_vp().with_weight(WeightKind::Uniform);
        assert_eq!(s.weight(0.37), 1.0);
    }

    #[test]
    fn bad_tables_are_rejected() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.7]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.2, 0.7]).is_err());
    }

    #[test]
    fn unknown_kind_string_errors() {
        assert!("warp-drive".parse::<ScheduleKind>().is_err());
        assert_eq!(
            "cosine-vp".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::CosineVp
        );
    }
}
