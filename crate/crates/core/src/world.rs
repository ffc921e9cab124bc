//! Synthetic chunk-conditional world and the denoisers that target it.
//!
//! A chunk is a flat vector of `frames_per_chunk * frame_dim` values, frame
//! major. Given the previous chunk `s`, the next chunk is drawn from
//! `Normal(M s + m, diag(Sigma))`, or from a mixture of such Gaussians whose
//! means are shifted by per-component offsets. Under the rectified-flow
//! corruption `x_tau = (1 - tau) x0 + tau eps` the posterior mean of `x0` is
//! available in closed form, which gives the exact denoiser.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::NoiseStream;
use crate::schedule::NoiseLevel;
use crate::Latent;

/// Mixture components: mean offsets added to the conditional mean, with weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub offsets: Vec<Latent>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub frame_dim: usize,
    pub frames_per_chunk: usize,
    pub transition: DMatrix<f64>,
    pub offset: Latent,
    pub process_var: Latent,
    pub init_mean: Latent,
    pub init_var: Latent,
    pub mixture: Option<MixtureSpec>,
    pub stationary: bool,
}

/// Parameters of the default "video" world: every frame of a new chunk is the
/// last frame of the previous chunk propagated through a damped rotation and
/// relaxed toward a stationary mean frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDynamics {
    pub frame_dim: usize,
    pub frames_per_chunk: usize,
    /// Per-frame contraction factor of the propagator.
    pub persistence: f64,
    /// Rotation angle per frame, applied to coordinate pairs (0,1), (2,3), ...
    pub rotation: f64,
    pub mean_frame: Latent,
    pub process_var: Latent,
    pub init_var: Latent,
}

impl WorldSpec {
    pub fn chunk_dim(&self) -> usize {
        self.frame_dim * self.frames_per_chunk
    }

    pub fn n_components(&self) -> usize {
        self.mixture.as_ref().map_or(1, |m| m.weights.len())
    }

    /// Builds and validates a world.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        frame_dim: usize,
        frames_per_chunk: usize,
        transition: DMatrix<f64>,
        offset: Latent,
        process_var: Latent,
        init_mean: Latent,
        init_var: Latent,
        mixture: Option<MixtureSpec>,
        stationary: bool,
    ) -> Result<Self> {
        let w = Self {
            frame_dim,
            frames_per_chunk,
            transition,
            offset,
            process_var,
            init_mean,
            init_var,
            mixture,
            stationary,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0 || self.frames_per_chunk == 0 {
            return Err(LabError::InvalidWorld("frame_dim and frames_per_chunk must be positive".into()));
        }
        let n = self.chunk_dim();
        let bad = |what: &str, got: usize| LabError::InvalidWorld(format!("{what} has dimension {got}, expected {n}"));
        if self.transition.nrows() != n || self.transition.ncols() != n {
            return Err(bad("transition", self.transition.nrows()));
        }
        for (name, v) in [
            ("offset", &self.offset),
            ("process_var", &self.process_var),
            ("init_mean", &self.init_mean),
            ("init_var", &self.init_var),
        ] {
            if v.len() != n {
                return Err(bad(name, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(LabError::InvalidWorld(format!("{name} has non-finite entries")));
            }
        }
        if self.process_var.iter().chain(self.init_var.iter()).any(|&s| s < 0.0) {
            return Err(LabError::InvalidWorld("variances must be nonnegative".into()));
        }
        if let Some(mix) = &self.mixture {
            if mix.weights.is_empty() || mix.weights.len() != mix.offsets.len() {
                return Err(LabError::InvalidWorld("mixture needs one weight per offset".into()));
            }
            if mix.weights.iter().any(|&w| !(w > 0.0)) {
                return Err(LabError::InvalidWorld("mixture weights must be positive".into()));
            }
            let total: f64 = mix.weights.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(LabError::InvalidWorld(format!("mixture weights sum to {total}")));
            }
            if let Some(o) = mix.offsets.iter().find(|o| o.len() != n) {
                return Err(bad("mixture offset", o.len()));
            }
        }
        if self.stationary {
            let rho = self.spectral_radius();
            if !(rho < 1.0) {
                return Err(LabError::InvalidWorld(format!(
                    "stationary world needs spectral radius < 1, got {rho}"
                )));
            }
        }
        Ok(())
    }

    pub fn spectral_radius(&self) -> f64 {
        self.transition
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Scalar world (one frame of one coordinate).
    pub fn scalar(transition: f64, offset: f64, process_var: f64, init_mean: f64, init_var: f64) -> Result<Self> {
        let one = |x: f64| DVector::from_element(1, x);
        Self::new(
            1,
            1,
            DMatrix::from_element(1, 1, transition),
            one(offset),
            one(process_var),
            one(init_mean),
            one(init_var),
            None,
            transition.abs() < 1.0,
        )
    }

    /// Frame-propagation world; the initial chunk is drawn around the
    /// stationary mean so the clean process starts in equilibrium.
    pub fn from_dynamics(d: &FrameDynamics) -> Result<Self> {
        let (dim, frames) = (d.frame_dim, d.frames_per_chunk);
        if d.mean_frame.len() != dim || d.process_var.len() != dim || d.init_var.len() != dim {
            return Err(LabError::InvalidWorld(format!("frame vectors must have length {dim}")));
        }
        let n = dim * frames;
        let prop = frame_propagator(dim, d.persistence, d.rotation);
        let mut transition = DMatrix::zeros(n, n);
        let mut offset = DVector::zeros(n);
        let last = (frames - 1) * dim;
        let mut power = prop.clone();
        let eye = DMatrix::<f64>::identity(dim, dim);
        for i in 0..frames {
            transition.view_mut((i * dim, last), (dim, dim)).copy_from(&power);
            let m_i = (&eye - &power) * &d.mean_frame;
            offset.rows_mut(i * dim, dim).copy_from(&m_i);
            power = &prop * &power;
        }
        let tile = |v: &Latent| DVector::from_fn(n, |k, _| v[k % dim]);
        Self::new(
            dim,
            frames,
            transition,
            offset,
            tile(&d.process_var),
            tile(&d.mean_frame),
            tile(&d.init_var),
            None,
            true,
        )
    }

    /// Mean of the clean chunk process at equilibrium, solving `(I - M) mu = m + E[offset]`.
    pub fn stationary_mean(&self) -> Result<Latent> {
        let n = self.chunk_dim();
        let mut rhs = self.offset.clone();
        if let Some(mix) = &self.mixture {
            for (w, o) in mix.weights.iter().zip(&mix.offsets) {
                rhs += o * *w;
            }
        }
        let a = DMatrix::<f64>::identity(n, n) - &self.transition;
        a.lu()
            .solve(&rhs)
            .ok_or_else(|| LabError::InvalidWorld("I - M is singular; no stationary mean".into()))
    }

    pub fn init_prior(&self) -> Prior {
        Prior::gaussian(self.init_mean.clone(), self.init_var.clone())
    }

    /// Splits a chunk into its frames.
    pub fn frames<'a>(&self, chunk: &'a Latent) -> impl Iterator<Item = Latent> + 'a {
        let d = self.frame_dim;
        (0..self.frames_per_chunk).map(move |i| chunk.rows(i * d, d).into_owned())
    }
}

fn frame_propagator(dim: usize, persistence: f64, angle: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(dim, dim);
    let (s, c) = angle.sin_cos();
    let mut i = 0;
    while i + 1 < dim {
        a[(i, i)] = c;
        a[(i, i + 1)] = -s;
        a[(i + 1, i)] = s;
        a[(i + 1, i + 1)] = c;
        i += 2;
    }
    if dim % 2 == 1 {
        a[(dim - 1, dim - 1)] = 1.0;
    }
    a * persistence
}

/// Gaussian conditional `Normal(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPrior {
    pub mean: Latent,
    pub var: Latent,
}

/// Weighted mixture of Gaussian conditionals; a single component for
/// Gaussian worlds.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub components: Vec<(f64, ConditionalPrior)>,
}

impl Prior {
    pub fn gaussian(mean: Latent, var: Latent) -> Self {
        Self {
            components: vec![(1.0, ConditionalPrior { mean, var })],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.mean.len()
    }

    /// Mixture mean.
    pub fn mean(&self) -> Latent {
        let mut out = DVector::zeros(self.dim());
        for (w, c) in &self.components {
            out += &c.mean * *w;
        }
        out
    }

    /// Single Gaussian with the mixture's mean and per-coordinate variance.
    pub fn moment_matched(&self) -> ConditionalPrior {
        if self.components.len() == 1 {
            return self.components[0].1.clone();
        }
        let mean = self.mean();
        let mut second = DVector::zeros(self.dim());
        for (w, c) in &self.components {
            second += c.var.zip_map(&c.mean, |s, m| s + m * m) * *w;
        }
        let var = second.zip_map(&mean, |s2, m| (s2 - m * m).max(0.0));
        ConditionalPrior { mean, var }
    }

    /// Mean-blend with another prior of the same component structure:
    /// `lambda * other + (1 - lambda) * self`. Variances are kept.
    pub fn blend_toward(&self, other: &Prior, lambda: f64) -> Prior {
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|((w, a), (_, b))| {
                let mean = a.mean.zip_map(&b.mean, |x, y| lambda * y + (1.0 - lambda) * x);
                (*w, ConditionalPrior { mean, var: a.var.clone() })
            })
            .collect();
        Prior { components }
    }

    /// Draws one chunk from the prior.
    pub fn sample(&self, rng: &mut NoiseStream) -> Latent {
        let k = if self.components.len() == 1 {
            0
        } else {
            let u = rng.uniform();
            let mut acc = 0.0;
            self.components
                .iter()
                .position(|(w, _)| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(self.components.len() - 1)
        };
        let c = &self.components[k].1;
        let eps = rng.normal_vec(c.mean.len());
        DVector::from_fn(c.mean.len(), |i, _| c.mean[i] + c.var[i].sqrt() * eps[i])
    }
}

fn check_len(expected: usize, v: &Latent) -> Result<()> {
    if v.len() != expected {
        return Err(LabError::DimensionMismatch { expected, got: v.len() });
    }
    Ok(())
}

/// Conditional distribution of the next chunk given the previous one.
pub fn conditional_prior(world: &WorldSpec, conditioning_chunk: &Latent) -> Result<Prior> {
    check_len(world.chunk_dim(), conditioning_chunk)?;
    let base = &world.transition * conditioning_chunk + &world.offset;
    Ok(match &world.mixture {
        None => Prior::gaussian(base, world.process_var.clone()),
        Some(mix) => Prior {
            components: mix
                .weights
                .iter()
                .zip(&mix.offsets)
                .map(|(w, o)| {
                    (
                        *w,
                        ConditionalPrior {
                            mean: &base + o,
                            var: world.process_var.clone(),
                        },
                    )
                })
                .collect(),
        },
    })
}

/// Chunk 0 from the initial distribution, then the conditional recursion.
pub fn sample_ground_truth(world: &WorldSpec, n_chunks: usize, rng: &mut NoiseStream) -> Vec<Latent> {
    let mut chunks = Vec::with_capacity(n_chunks);
    if n_chunks == 0 {
        return chunks;
    }
    chunks.push(world.init_prior().sample(rng));
    for t in 1..n_chunks {
        let prior = conditional_prior(world, &chunks[t - 1]).expect("chunk dimension is fixed by the world");
        chunks.push(prior.sample(rng));
    }
    chunks
}

/// Per-coordinate gain of the Gaussian posterior mean on its observation.
#[inline]
fn posterior_gain(s: f64, tau: f64) -> f64 {
    let a = 1.0 - tau;
    let denom = a * a * s + tau * tau;
    if denom == 0.0 {
        0.0
    } else {
        a * s / denom
    }
}

/// `E[x0 | x_tau]` for `x0 ~ Normal(mean, diag(var))` and
/// `x_tau | x0 ~ Normal((1 - tau) x0, tau^2 I)`.
pub fn exact_posterior_mean(prior: &ConditionalPrior, x_tau: &Latent, tau: NoiseLevel) -> Result<Latent> {
    check_len(prior.mean.len(), x_tau)?;
    if tau.tau() <= 0.0 {
        return Err(LabError::Singularity);
    }
    Ok(gaussian_posterior_mean(prior, x_tau, tau.tau()))
}

pub(crate) fn gaussian_posterior_mean(prior: &ConditionalPrior, x_tau: &Latent, tau: f64) -> Latent {
    let a = 1.0 - tau;
    DVector::from_fn(x_tau.len(), |i, _| {
        let mu = prior.mean[i];
        mu + posterior_gain(prior.var[i], tau) * (x_tau[i] - a * mu)
    })
}

/// Posterior responsibilities of each mixture component given `x_tau`,
/// normalized in log space.
pub fn responsibilities(prior: &Prior, x_tau: &Latent, tau: NoiseLevel) -> Vec<f64> {
    let t = tau.tau();
    let a = 1.0 - t;
    let logs: Vec<f64> = prior
        .components
        .iter()
        .map(|(w, c)| {
            let mut lp = w.ln();
            for i in 0..x_tau.len() {
                let v = a * a * c.var[i] + t * t;
                let r = x_tau[i] - a * c.mean[i];
                if v > 0.0 {
                    lp -= 0.5 * (r * r / v + (2.0 * std::f64::consts::PI * v).ln());
                } else if r != 0.0 {
                    lp = f64::NEG_INFINITY;
                }
            }
            lp
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Every component is impossible (only with zero variance at tau = 0);
        // fall back to the prior weights.
        return prior.components.iter().map(|(w, _)| *w).collect();
    }
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn mixture_posterior_mean(prior: &Prior, x_tau: &Latent, tau: NoiseLevel) -> Result<Latent> {
    check_len(prior.dim(), x_tau)?;
    if tau.tau() <= 0.0 {
        return Err(LabError::Singularity);
    }
    Ok(mixture_mean_unchecked(prior, x_tau, tau))
}

fn mixture_mean_unchecked(prior: &Prior, x_tau: &Latent, tau: NoiseLevel) -> Latent {
    if prior.components.len() == 1 {
        return gaussian_posterior_mean(&prior.components[0].1, x_tau, tau.tau());
    }
    let resp = responsibilities(prior, x_tau, tau);
    let mut out = DVector::zeros(x_tau.len());
    for (r, (_, c)) in resp.iter().zip(&prior.components) {
        out += gaussian_posterior_mean(c, x_tau, tau.tau()) * *r;
    }
    out
}

/// Rank-`r` output perturbation `u -> u + left * (right * u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    /// `n x r`
    pub left: DMatrix<f64>,
    /// `r x n`
    pub right: DMatrix<f64>,
}

impl LowRankAdapter {
    pub fn zeros(dim: usize, rank: usize) -> Self {
        Self {
            left: DMatrix::zeros(dim, rank),
            right: DMatrix::zeros(rank, dim),
        }
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.left.len() + self.right.len()
    }

    pub fn apply(&self, u: &Latent) -> Latent {
        u + &self.left * (&self.right * u)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.left.norm_squared() + self.right.norm_squared()
    }

    /// Flat parameter view: `left` column-major, then `right` column-major.
    pub fn params(&self) -> Vec<f64> {
        self.left.iter().chain(self.right.iter()).copied().collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nl = self.left.len();
        self.left.as_mut_slice().copy_from_slice(&p[..nl]);
        self.right.as_mut_slice().copy_from_slice(&p[nl..]);
    }
}

/// Clean-prediction map `G(x_tau; S, tau)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    /// Gaussian posterior mean under the (moment-matched) conditional prior.
    Exact,
    /// Full mixture posterior mean.
    Mixture,
    /// `gain * inner + bias`; emulates a distilled model's systematic error.
    Biased { gain: f64, bias: Latent, inner: Box<Denoiser> },
    /// Inner output passed through a low-rank adapter.
    Adapted { adapter: LowRankAdapter, inner: Box<Denoiser> },
}

impl Denoiser {
    pub fn biased(inner: Denoiser, gain: f64, bias: Latent) -> Self {
        Denoiser::Biased { gain, bias, inner: Box::new(inner) }
    }

    pub fn adapted(inner: Denoiser, adapter: LowRankAdapter) -> Self {
        Denoiser::Adapted { adapter, inner: Box::new(inner) }
    }

    /// Exact for Gaussian worlds, mixture posterior otherwise.
    pub fn bayes_for(world: &WorldSpec) -> Self {
        if world.mixture.is_some() {
            Denoiser::Mixture
        } else {
            Denoiser::Exact
        }
    }

    pub fn denoise(&self, x_tau: &Latent, prior: &Prior, tau: NoiseLevel) -> Result<Latent> {
        check_len(prior.dim(), x_tau)?;
        if tau.tau() <= 0.0 {
            return Err(LabError::Singularity);
        }
        Ok(self.eval(x_tau, prior, tau))
    }

    pub(crate) fn eval(&self, x_tau: &Latent, prior: &Prior, tau: NoiseLevel) -> Latent {
        match self {
            Denoiser::Exact => gaussian_posterior_mean(&prior.moment_matched(), x_tau, tau.tau()),
            Denoiser::Mixture => mixture_mean_unchecked(prior, x_tau, tau),
            Denoiser::Biased { gain, bias, inner } => biased_denoise(*gain, bias, &inner.eval(x_tau, prior, tau)),
            Denoiser::Adapted { adapter, inner } => adapter.apply(&inner.eval(x_tau, prior, tau)),
        }
    }

    /// `J^T c` for the input Jacobian `J = dG/dx_tau`, when the map is affine
    /// in `x_tau`. Mixture posteriors with more than one component are not.
    pub fn vjp(&self, cotangent: &Latent, prior: &Prior, tau: NoiseLevel) -> Option<Latent> {
        match self {
            Denoiser::Exact => {
                let p = prior.moment_matched();
                Some(DVector::from_fn(cotangent.len(), |i, _| posterior_gain(p.var[i], tau.tau()) * cotangent[i]))
            }
            Denoiser::Mixture if prior.components.len() == 1 => Denoiser::Exact.vjp(cotangent, prior, tau),
            Denoiser::Mixture => None,
            Denoiser::Biased { gain, inner, .. } => inner.vjp(cotangent, prior, tau).map(|v| v * *gain),
            Denoiser::Adapted { adapter, inner } => {
                let pulled = cotangent + adapter.right.transpose() * (adapter.left.transpose() * cotangent);
                inner.vjp(&pulled, prior, tau)
            }
        }
    }

    pub fn is_affine(&self, prior: &Prior) -> bool {
        match self {
            Denoiser::Exact => true,
            Denoiser::Mixture => prior.components.len() == 1,
            Denoiser::Biased { inner, .. } | Denoiser::Adapted { inner, .. } => inner.is_affine(prior),
        }
    }

    /// Outermost adapter, if any.
    pub fn adapter(&self) -> Option<&LowRankAdapter> {
        match self {
            Denoiser::Adapted { adapter, .. } => Some(adapter),
            _ => None,
        }
    }
}

/// `gain * inner_output + bias`.
pub fn biased_denoise(gain: f64, bias: &Latent, inner_output: &Latent) -> Latent {
    inner_output.zip_map(bias, |u, b| gain * u + b)
}
