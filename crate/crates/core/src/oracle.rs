//! Independent numerical checks of the analytic pieces: quadrature for the
//! Gaussian posterior, importance-weighted Monte Carlo for the mixture
//! posterior, finite differences for the encoder Jacobian and the adapter
//! gradient.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::exec::{map_indexed, ExecMode};
use crate::metrics::FrameEncoder;
use crate::rng::{NoiseStream, Purpose};
use crate::sampler::{rollout, ChunkContext, ChunkDraws, RolloutConfig, Strategy};
use crate::schedule::{NoiseLevel, NoiseSchedule};
use crate::ttx::{reward_gradient, AdapterSpec, GradientMode, RewardSpec};
use crate::world::{
    exact_posterior_mean, mixture_posterior_mean, ConditionalPrior, Denoiser, FrameDynamics, Prior, WorldSpec,
};
use crate::Latent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    /// Observed discrepancy in the unit of `tolerance`.
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl OracleCheck {
    fn new(name: &str, error: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), error, tolerance, passed: error <= tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: error {:.3e} (tolerance {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance,
            self.detail
        )
    }
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// `E[x0 | x_tau]` by composite Simpson quadrature over the joint density.
pub fn quadrature_posterior_mean(mean: f64, var: f64, x_tau: f64, tau: f64) -> f64 {
    let sd = var.sqrt();
    let (lo, hi) = (mean - 14.0 * sd, mean + 14.0 * sd);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let x0 = lo + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let joint = normal_pdf(x0, mean, var) * normal_pdf(x_tau, (1.0 - tau) * x0, tau * tau);
        num += w * x0 * joint;
        den += w * joint;
    }
    num / den
}

pub fn check_posterior_quadrature() -> OracleCheck {
    let cases = [
        (0.0, 1.0, 0.5, 1.0),
        (0.3, 0.7, 0.2, -1.2),
        (0.3, 0.7, 0.9, 2.5),
        (-1.0, 0.05, 0.75, 0.4),
        (2.0, 3.0, 0.25, 1.1),
    ];
    let mut worst: f64 = 0.0;
    for (m, s, tau, x) in cases {
        let prior = ConditionalPrior { mean: DVector::from_element(1, m), var: DVector::from_element(1, s) };
        let exact = exact_posterior_mean(&prior, &DVector::from_element(1, x), NoiseLevel::new(tau).unwrap()).unwrap()[0];
        worst = worst.max((exact - quadrature_posterior_mean(m, s, x, tau)).abs());
    }
    OracleCheck::new("posterior-vs-quadrature", worst, 1e-6, format!("{} cases", cases.len()))
}

/// Self-normalized importance estimate of `E[x0 | x_tau]` for a 1D mixture:
/// `x0` drawn from the prior, weighted by the likelihood of `x_tau`.
/// Returns `(estimate, standard error)`.
pub fn monte_carlo_mixture_mean(prior: &Prior, x_tau: f64, tau: f64, samples: usize, seed: u64) -> (f64, f64) {
    let blocks = 64;
    let per = samples.div_ceil(blocks);
    let partial = map_indexed(blocks, ExecMode::default(), |b| {
        let mut rng = NoiseStream::new(seed, b as u64, Purpose::Oracle, 0);
        let (mut sw, mut swx, mut sww, mut swwx, mut swwxx) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..per {
            let x0 = prior.sample(&mut rng)[0];
            let w = normal_pdf(x_tau, (1.0 - tau) * x0, tau * tau);
            sw += w;
            swx += w * x0;
            sww += w * w;
            swwx += w * w * x0;
            swwxx += w * w * x0 * x0;
        }
        [sw, swx, sww, swwx, swwxx]
    });
    let mut s = [0.0; 5];
    for p in &partial {
        for (a, b) in s.iter_mut().zip(p) {
            *a += b;
        }
    }
    let [sw, swx, sww, swwx, swwxx] = s;
    let est = swx / sw;
    // Delta-method variance of the ratio estimator.
    let var = (swwxx - 2.0 * est * swwx + est * est * sww) / (sw * sw);
    (est, var.sqrt())
}

pub fn check_mixture_monte_carlo(samples: usize) -> OracleCheck {
    let prior = Prior {
        components: vec![
            (0.3, ConditionalPrior { mean: DVector::from_element(1, -1.0), var: DVector::from_element(1, 0.25) }),
            (0.7, ConditionalPrior { mean: DVector::from_element(1, 1.5), var: DVector::from_element(1, 0.5) }),
        ],
    };
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (i, (x, tau)) in [(0.2, 0.5), (-0.6, 0.3), (1.0, 0.8)].into_iter().enumerate() {
        let analytic =
            mixture_posterior_mean(&prior, &DVector::from_element(1, x), NoiseLevel::new(tau).unwrap()).unwrap()[0];
        let (est, se) = monte_carlo_mixture_mean(&prior, x, tau, samples, 0x6d69_7874 + i as u64);
        let z = (analytic - est).abs() / se;
        worst = worst.max(z);
        detail.push(format!("{analytic:.5}~{est:.5}"));
    }
    OracleCheck::new("mixture-vs-monte-carlo (in SE)", worst, 3.0, format!("{samples} samples: {}", detail.join(", ")))
}

pub fn check_encoder_jacobian(encoder: &FrameEncoder) -> OracleCheck {
    let h = 1e-5;
    let d = encoder.input_dim();
    let mut rng = NoiseStream::new(0x006a_6163, 0, Purpose::Oracle, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let f = rng.normal_vec(d);
        let j = encoder.jacobian(&f);
        let mut fd = j.clone();
        for k in 0..d {
            let mut p = f.clone();
            p[k] += h;
            let mut m = f.clone();
            m[k] -= h;
            fd.set_column(k, &((encoder.encode(&p) - encoder.encode(&m)) / (2.0 * h)));
        }
        worst = worst.max((&fd - &j).norm() / j.norm());
    }
    OracleCheck::new("encoder-jacobian-vs-finite-differences (relative)", worst, 1e-4, "20 frames".into())
}

pub fn check_adapter_gradient() -> OracleCheck {
    let world = WorldSpec::from_dynamics(&FrameDynamics {
        frame_dim: 4,
        frames_per_chunk: 2,
        persistence: 0.95,
        rotation: 0.3,
        mean_frame: DVector::from_column_slice(&[1.0, 0.5, -0.5, 0.2]),
        process_var: DVector::from_element(4, 0.05),
        init_var: DVector::from_element(4, 0.1),
    })
    .expect("valid world");
    let inner = Denoiser::biased(Denoiser::Exact, 1.02, Latent::zeros(world.chunk_dim()));
    let config = RolloutConfig::new(1, NoiseSchedule::default(), Strategy::baseline());
    let first = rollout(&inner, &world, &config, 17).expect("rollout").chunks.remove(0);
    let mut ctx = ChunkContext::new(3);
    ctx.push(first);
    let spec = AdapterSpec { rank: 3, init_scale: 0.5, ..Default::default() };
    let mut adapter = spec.init(world.chunk_dim(), &mut NoiseStream::new(5, 0, Purpose::AdapterInit, 0));
    let mut p = adapter.params();
    let mut rng = NoiseStream::new(6, 0, Purpose::Oracle, 0);
    for v in p.iter_mut() {
        *v += 0.1 * rng.scalar_normal();
    }
    adapter.set_params(&p);
    let draws = ChunkDraws::new(99, 1);
    let mut worst: f64 = 0.0;
    for reward in [RewardSpec::reconstruction(), RewardSpec::drift_penalty()] {
        let bound = reward.bind(&ctx, &world);
        let (_, ga) =
            reward_gradient(&inner, &adapter, &world, &ctx, &config.schedule, &bound, &draws, GradientMode::Analytic)
                .expect("analytic gradient");
        let (_, gf) = reward_gradient(
            &inner,
            &adapter,
            &world,
            &ctx,
            &config.schedule,
            &bound,
            &draws,
            GradientMode::FiniteDifference,
        )
        .expect("finite-difference gradient");
        let num = ga.iter().zip(&gf).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = ga.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    OracleCheck::new("adapter-gradient-fd-vs-analytic (relative)", worst, 1e-5, format!("{} parameters", adapter.n_params()))
}

/// Runs every oracle. `mc_samples` is the Monte-Carlo budget of the mixture check.
pub fn run_all(encoder: &FrameEncoder, mc_samples: usize) -> Vec<OracleCheck> {
    vec![
        check_posterior_quadrature(),
        check_mixture_monte_carlo(mc_samples),
        check_encoder_jacobian(encoder),
        check_adapter_gradient(),
    ]
}
