//! Noise levels, rectified-flow coefficients and the forward corruption map.
//!
//! Convention: `tau = 1` is pure noise and `tau = 0` is clean data. Integer
//! timesteps on a 1000-step scale map to `tau = T / 1000`, so 750 becomes 0.75.
//! The interpolation-time convention `t = 1 - tau` is used nowhere internally.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::Latent;

/// Tolerance used when matching configured levels against schedule levels.
pub const LEVEL_TOL: f64 = 1e-12;

/// Number of integer timesteps on the full training scale.
pub const T_MAX: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) || tau.is_nan() {
            return Err(LabError::InvalidSchedule(format!("noise level {tau} outside [0, 1]")));
        }
        Ok(Self(tau))
    }

    /// Maps an integer timestep such as 750 onto the unit interval.
    pub fn from_timestep(t: u32) -> Result<Self> {
        Self::new(t as f64 / T_MAX)
    }

    pub const CLEAN: NoiseLevel = NoiseLevel(0.0);
    pub const NOISE: NoiseLevel = NoiseLevel(1.0);

    #[inline]
    pub fn tau(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn alpha(self) -> f64 {
        1.0 - self.0
    }

    #[inline]
    pub fn sigma(self) -> f64 {
        self.0
    }

    pub fn approx_eq(self, other: NoiseLevel) -> bool {
        (self.0 - other.0).abs() <= LEVEL_TOL
    }
}

/// Strictly decreasing noise levels `tau_J > ... > tau_1 > 0`.
///
/// The clean terminal level is implicit and never passed to a denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: Vec<NoiseLevel>,
}

impl NoiseSchedule {
    /// Number of levels, which is also the NFE of one uncorrected chunk.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[NoiseLevel] {
        &self.levels
    }

    pub fn taus(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.tau()).collect()
    }

    pub fn top(&self) -> NoiseLevel {
        self.levels[0]
    }

    pub fn lowest(&self) -> NoiseLevel {
        *self.levels.last().expect("schedule is nonempty")
    }

    pub fn contains(&self, level: NoiseLevel) -> bool {
        self.position(level).is_some()
    }

    pub fn position(&self, level: NoiseLevel) -> Option<usize> {
        self.levels.iter().position(|l| l.approx_eq(level))
    }

    /// The level after `index`, or the clean endpoint past the last one.
    pub fn next_lower(&self, index: usize) -> NoiseLevel {
        self.levels.get(index + 1).copied().unwrap_or(NoiseLevel::CLEAN)
    }

    /// `count` equally spaced levels `1, (count-1)/count, ..., 1/count`.
    pub fn uniform(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(LabError::InvalidSchedule("uniform schedule needs at least one level".into()));
        }
        let taus: Vec<f64> = (0..count).map(|i| (count - i) as f64 / count as f64).collect();
        make_rf_schedule(&taus)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_rf_schedule(&[1.0, 0.75, 0.5, 0.25]).expect("default schedule is valid")
    }
}

pub fn make_rf_schedule(taus: &[f64]) -> Result<NoiseSchedule> {
    if taus.is_empty() {
        return Err(LabError::InvalidSchedule("no levels given".into()));
    }
    for &t in taus {
        if !(t > 0.0 && t <= 1.0) {
            return Err(LabError::InvalidSchedule(format!("level {t} outside (0, 1]")));
        }
    }
    if let Some(w) = taus.windows(2).find(|w| w[1] >= w[0]) {
        return Err(LabError::InvalidSchedule(format!(
            "levels must be strictly decreasing, found {} then {}",
            w[0], w[1]
        )));
    }
    Ok(NoiseSchedule {
        levels: taus.iter().map(|&t| NoiseLevel(t)).collect(),
    })
}

fn check_dims(a: &Latent, b: &Latent) -> Result<()> {
    if a.len() != b.len() {
        return Err(LabError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// `alpha(tau) * x + sigma(tau) * eps`.
pub fn forward_diffuse(x: &Latent, eps: &Latent, tau: NoiseLevel) -> Result<Latent> {
    check_dims(x, eps)?;
    Ok(forward_diffuse_unchecked(x, eps, tau))
}

#[inline]
pub(crate) fn forward_diffuse_unchecked(x: &Latent, eps: &Latent, tau: NoiseLevel) -> Latent {
    let (a, s) = (tau.alpha(), tau.sigma());
    x.zip_map(eps, |xi, ei| a * xi + s * ei)
}

/// Velocity `v` with `x0_hat = x_tau + tau * v`.
pub fn velocity_from_prediction(x_tau: &Latent, x0_hat: &Latent, tau: NoiseLevel) -> Result<Latent> {
    check_dims(x_tau, x0_hat)?;
    if tau.tau() <= 0.0 {
        return Err(LabError::Singularity);
    }
    let t = tau.tau();
    Ok(x0_hat.zip_map(x_tau, |p, x| (p - x) / t))
}

/// Explicit Euler step `x + (tau_from - tau_to) * v`.
pub fn euler_step(x: &Latent, v: &Latent, tau_from: NoiseLevel, tau_to: NoiseLevel) -> Result<Latent> {
    check_dims(x, v)?;
    if tau_from.tau() <= tau_to.tau() {
        return Err(LabError::StepDirection { from: tau_from.tau(), to: tau_to.tau() });
    }
    let h = tau_from.tau() - tau_to.tau();
    Ok(x.zip_map(v, |xi, vi| xi + h * vi))
}

pub fn zeros(n: usize) -> Latent {
    DVector::zeros(n)
}
