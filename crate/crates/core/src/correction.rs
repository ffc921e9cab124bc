//! Reference-guided corrections applied inside the stochastic sampler.
//!
//! * single-point: one denoiser call sees the reference context instead of
//!   the evolving one; no extra calls.
//! * path-wise: at each corrected level the current clean prediction is
//!   renoised and denoised under the reference context (Phase A), the result
//!   is renoised again and denoised under the evolving context (Phase B).
//!   One extra call per corrected level.
//! * sink: the reference is blended into the conditioning at every level.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{DrawId, NoiseStream};
use crate::sampler::{call, ChunkContext, ContextTag, StepTrace};
use crate::schedule::{forward_diffuse_unchecked, NoiseLevel, NoiseSchedule};
use crate::world::{Denoiser, WorldSpec};
use crate::Latent;

/// Default path-wise correction levels (timesteps 500 and 250).
pub const DEFAULT_PATHWISE_LEVELS: [f64; 2] = [0.5, 0.25];
pub const DEFAULT_SINK_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    #[default]
    Baseline,
    SinglePoint,
    PathWise,
    Sink,
}

impl CorrectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionMode::Baseline => "baseline",
            CorrectionMode::SinglePoint => "single-point",
            CorrectionMode::PathWise => "path-wise",
            CorrectionMode::Sink => "sink",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionConfig {
    pub mode: CorrectionMode,
    /// Corrected levels (path-wise) or the single swapped level (single-point).
    pub levels: Vec<NoiseLevel>,
    pub sink_lambda: f64,
}

impl CorrectionConfig {
    pub fn baseline() -> Self {
        Self {
            mode: CorrectionMode::Baseline,
            levels: Vec::new(),
            sink_lambda: DEFAULT_SINK_LAMBDA,
        }
    }

    pub fn path_wise(levels: &[f64]) -> Result<Self> {
        Ok(Self {
            mode: CorrectionMode::PathWise,
            levels: levels.iter().map(|&t| NoiseLevel::new(t)).collect::<Result<_>>()?,
            sink_lambda: DEFAULT_SINK_LAMBDA,
        })
    }

    pub fn single_point(level: f64) -> Result<Self> {
        Ok(Self {
            mode: CorrectionMode::SinglePoint,
            levels: vec![NoiseLevel::new(level)?],
            sink_lambda: DEFAULT_SINK_LAMBDA,
        })
    }

    pub fn sink(lambda: f64) -> Self {
        Self {
            mode: CorrectionMode::Sink,
            levels: Vec::new(),
            sink_lambda: lambda,
        }
    }

    pub fn is_corrected(&self, level: NoiseLevel) -> bool {
        self.levels.iter().any(|l| l.approx_eq(level))
    }

    /// Levels must be schedule members strictly below the top level.
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        for &l in &self.levels {
            if !schedule.contains(l) {
                return Err(LabError::Config(format!(
                    "correction level {} is not in the schedule {:?}",
                    l.tau(),
                    schedule.taus()
                )));
            }
            if l.approx_eq(schedule.top()) {
                return Err(LabError::Config(format!(
                    "correction level {} is the top level; corrections apply only below it",
                    l.tau()
                )));
            }
        }
        for (i, a) in self.levels.iter().enumerate() {
            if self.levels[..i].iter().any(|b| b.approx_eq(*a)) {
                return Err(LabError::Config(format!("correction level {} listed twice", a.tau())));
            }
        }
        match self.mode {
            CorrectionMode::SinglePoint if self.levels.len() != 1 => Err(LabError::Config(
                "single-point correction needs exactly one level".into(),
            )),
            CorrectionMode::Baseline | CorrectionMode::Sink if !self.levels.is_empty() => Err(LabError::Config(format!(
                "{} mode takes no correction levels",
                self.mode.as_str()
            ))),
            CorrectionMode::Sink if !(0.0..=1.0).contains(&self.sink_lambda) => Err(LabError::Config(format!(
                "sink_lambda {} outside [0, 1]",
                self.sink_lambda
            ))),
            _ => Ok(()),
        }
    }

    /// `J + |J*|` for path-wise, `J` otherwise.
    pub fn nfe_per_chunk(&self, schedule: &NoiseSchedule) -> usize {
        match self.mode {
            CorrectionMode::PathWise => schedule.len() + self.levels.len(),
            _ => schedule.len(),
        }
    }
}

fn require_member(schedule: &NoiseSchedule, level: NoiseLevel) -> Result<()> {
    if !schedule.contains(level) {
        return Err(LabError::Config(format!("level {} is not in the schedule", level.tau())));
    }
    Ok(())
}

/// One path-wise correction at `tau_c`.
///
/// Draws two fresh noise vectors from `rng` (Phase A, then Phase B) and
/// returns the final clean prediction with the extra NFE it cost (always 1,
/// since it replaces the ordinary call at `tau_c`).
#[allow(clippy::too_many_arguments)]
pub fn pathwise_correct_step(
    denoiser: &Denoiser,
    world: &WorldSpec,
    x0_prev: &Latent,
    context: &ChunkContext,
    tau_c: NoiseLevel,
    schedule: &NoiseSchedule,
    rng: &mut NoiseStream,
    traces: &mut Vec<StepTrace>,
) -> Result<(Latent, usize)> {
    let phase_a = rng.normal(x0_prev.len());
    pathwise_step_with(denoiser, world, x0_prev, context, tau_c, schedule, phase_a, rng, traces)
}

/// Path-wise correction whose Phase A noise is supplied by the caller, which
/// lets the sampler reuse the ordinary transition draw.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pathwise_step_with(
    denoiser: &Denoiser,
    world: &WorldSpec,
    x0_prev: &Latent,
    context: &ChunkContext,
    tau_c: NoiseLevel,
    schedule: &NoiseSchedule,
    phase_a_noise: (Latent, DrawId),
    phase_b_rng: &mut NoiseStream,
    traces: &mut Vec<StepTrace>,
) -> Result<(Latent, usize)> {
    require_member(schedule, tau_c)?;
    if !(tau_c.tau() > 0.0 && tau_c.tau() < 1.0) {
        return Err(LabError::Config(format!("correction level {} must lie in (0, 1)", tau_c.tau())));
    }
    let (eps, eps_id) = phase_a_noise;
    let x_c = forward_diffuse_unchecked(x0_prev, &eps, tau_c);
    let reference = context.reference_prior(world);
    let corrected = call(denoiser, &x_c, &reference, tau_c, ContextTag::Reference, vec![eps_id], traces);

    let (eps_b, eps_b_id) = phase_b_rng.normal(x0_prev.len());
    let x_b = forward_diffuse_unchecked(&corrected, &eps_b, tau_c);
    let evolving = context.evolving_prior(world);
    let out = call(denoiser, &x_b, &evolving, tau_c, context.evolving_tag(), vec![eps_b_id], traces);
    Ok((out, 1))
}

/// The denoiser call at `tau_star` conditioned on the reference instead of
/// the evolving context.
#[allow(clippy::too_many_arguments)]
pub fn singlepoint_correct_step(
    denoiser: &Denoiser,
    world: &WorldSpec,
    x_tau: &Latent,
    context: &ChunkContext,
    tau_star: NoiseLevel,
    schedule: &NoiseSchedule,
    noise: Vec<DrawId>,
    traces: &mut Vec<StepTrace>,
) -> Result<Latent> {
    require_member(schedule, tau_star)?;
    let reference = context.reference_prior(world);
    Ok(call(denoiser, x_tau, &reference, tau_star, ContextTag::Reference, noise, traces))
}

/// Context whose conditioning mean is `lambda * mu(S_0) + (1 - lambda) * mu(S_t)`.
pub fn sink_augment(context: &ChunkContext, lambda: f64) -> ChunkContext {
    context.with_sink(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use crate::sampler::{rollout, sample_with_correction, ChunkDraws, RolloutConfig, Strategy};
    use nalgebra::{DMatrix, DVector};

    fn world(var: f64) -> WorldSpec {
        let n = 4;
        WorldSpec::new(
            2,
            2,
            DMatrix::identity(n, n) * 0.7,
            DVector::from_element(n, 0.3),
            DVector::from_element(n, var),
            DVector::from_element(n, 1.0),
            DVector::from_element(n, var),
            None,
            true,
        )
        .unwrap()
    }

    fn two_chunk_context() -> ChunkContext {
        let mut c = ChunkContext::new(3);
        c.push(DVector::from_element(4, 1.0));
        c.push(DVector::from_element(4, -2.0));
        c
    }

    fn lvl(t: f64) -> NoiseLevel {
        NoiseLevel::new(t).unwrap()
    }

    #[test]
    fn nfe_ladder() {
        let s = NoiseSchedule::default();
        let rows: [&[f64]; 7] = [&[], &[0.75], &[0.5], &[0.25], &[0.5, 0.25], &[0.75, 0.5], &[0.75, 0.5, 0.25]];
        let got: Vec<usize> = rows.iter().map(|r| CorrectionConfig::path_wise(r).unwrap().nfe_per_chunk(&s)).collect();
        assert_eq!(got, vec![4, 5, 5, 5, 6, 6, 7]);
        assert_eq!(CorrectionConfig::single_point(0.25).unwrap().nfe_per_chunk(&s), 4);
        assert_eq!(CorrectionConfig::sink(0.5).nfe_per_chunk(&s), 4);
    }

    #[test]
    fn validation() {
        let s = NoiseSchedule::default();
        assert!(CorrectionConfig::path_wise(&[0.6]).unwrap().validate(&s).is_err());
        assert!(CorrectionConfig::path_wise(&[1.0]).unwrap().validate(&s).is_err());
        assert!(CorrectionConfig::path_wise(&[0.5, 0.5]).unwrap().validate(&s).is_err());
        assert!(CorrectionConfig::path_wise(&[]).unwrap().validate(&s).is_ok());
        let mut sp = CorrectionConfig::single_point(0.25).unwrap();
        assert!(sp.validate(&s).is_ok());
        sp.levels.clear();
        assert!(sp.validate(&s).is_err());
        assert!(CorrectionConfig::sink(1.5).validate(&s).is_err());
    }

    #[test]
    fn pathwise_with_degenerate_prior_uses_evolving_context_last() {
        let w = world(0.0);
        let ctx = two_chunk_context();
        let mut rng = NoiseStream::new(1, 2, Purpose::Correction, 0);
        let mut traces = Vec::new();
        let x0 = DVector::from_element(4, 5.0);
        let (out, extra) =
            pathwise_correct_step(&Denoiser::Exact, &w, &x0, &ctx, lvl(0.5), &NoiseSchedule::default(), &mut rng, &mut traces).unwrap();
        assert_eq!(extra, 1);
        assert_eq!(rng.drawn(), 2);
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].prediction, ctx.reference_prior(&w).mean());
        assert_eq!(traces[0].context_tag, ContextTag::Reference);
        assert_eq!(out, ctx.evolving_prior(&w).mean());
        assert_eq!(traces[1].context_tag, ContextTag::Evolving);

        let bad = pathwise_correct_step(&Denoiser::Exact, &w, &x0, &ctx, lvl(0.6), &NoiseSchedule::default(), &mut rng, &mut traces);
        assert!(matches!(bad, Err(LabError::Config(_))));
    }

    #[test]
    fn singlepoint_with_degenerate_prior_returns_reference_mean() {
        let w = world(0.0);
        let ctx = two_chunk_context();
        let mut traces = Vec::new();
        let x = DVector::from_element(4, 0.3);
        let out = singlepoint_correct_step(&Denoiser::Exact, &w, &x, &ctx, lvl(0.25), &NoiseSchedule::default(), vec![], &mut traces).unwrap();
        assert_eq!(out, ctx.reference_prior(&w).mean());
        assert_ne!(out, ctx.evolving_prior(&w).mean());
    }

    #[test]
    fn singlepoint_on_first_generated_chunk_matches_baseline() {
        let w = world(0.2);
        let mut ctx = ChunkContext::new(3);
        ctx.push(DVector::from_element(4, 0.4));
        let s = NoiseSchedule::default();
        let mut a = ChunkDraws::new(5, 1);
        let mut b = ChunkDraws::new(5, 1);
        let (base, _) = sample_with_correction(&Denoiser::Exact, &w, &ctx, &s, &CorrectionConfig::baseline(), &mut a).unwrap();
        let (sp, tr) = sample_with_correction(&Denoiser::Exact, &w, &ctx, &s, &CorrectionConfig::single_point(0.25).unwrap(), &mut b).unwrap();
        assert_eq!(base, sp);
        assert_eq!(tr[3].context_tag, ContextTag::Reference);
    }

    #[test]
    fn sink_extremes() {
        let w = world(0.0);
        let s = NoiseSchedule::default();
        let base = rollout(&Denoiser::Exact, &w, &RolloutConfig::new(6, s.clone(), Strategy::baseline()), 3).unwrap();
        let zero = rollout(&Denoiser::Exact, &w, &RolloutConfig::new(6, s.clone(), Strategy::Correction(CorrectionConfig::sink(0.0))), 3).unwrap();
        assert_eq!(base.chunks, zero.chunks);

        let full = rollout(&Denoiser::Exact, &w, &RolloutConfig::new(6, s, Strategy::Correction(CorrectionConfig::sink(1.0))), 3).unwrap();
        let anchor = crate::world::conditional_prior(&w, &full.chunks[0]).unwrap().mean();
        for c in &full.chunks[1..] {
            assert_eq!(*c, anchor);
        }
    }

    #[test]
    fn trace_tag_sequences() {
        let w = world(0.2);
        let s = NoiseSchedule::default();
        let cfg = RolloutConfig::new(5, s.clone(), Strategy::Correction(CorrectionConfig::path_wise(&[0.5, 0.25]).unwrap()));
        let rec = rollout(&Denoiser::Exact, &w, &cfg, 2).unwrap();
        for tr in &rec.traces {
            let tags: Vec<(f64, ContextTag)> = tr.iter().map(|t| (t.level.tau(), t.context_tag)).collect();
            use ContextTag::*;
            assert_eq!(
                tags,
                vec![(1.0, Evolving), (0.75, Evolving), (0.5, Reference), (0.5, Evolving), (0.25, Reference), (0.25, Evolving)]
            );
        }
        let sp = rollout(&Denoiser::Exact, &w, &RolloutConfig::new(3, s.clone(), Strategy::Correction(CorrectionConfig::single_point(0.5).unwrap())), 2).unwrap();
        for tr in &sp.traces {
            let refs: Vec<f64> = tr.iter().filter(|t| t.context_tag == ContextTag::Reference).map(|t| t.level.tau()).collect();
            assert_eq!(refs, vec![0.5]);
        }
        let sink = rollout(&Denoiser::Exact, &w, &RolloutConfig::new(3, s, Strategy::Correction(CorrectionConfig::sink(0.5))), 2).unwrap();
        assert!(sink.traces.iter().flatten().all(|t| t.context_tag == ContextTag::SinkAugmented));
    }

    #[test]
    fn empty_pathwise_is_bit_identical_to_baseline() {
        let w = world(0.3);
        let s = NoiseSchedule::default();
        let base = rollout(&Denoiser::Exact, &w, &RolloutConfig::new(10, s.clone(), Strategy::baseline()), 42).unwrap();
        let empty = rollout(&Denoiser::Exact, &w, &RolloutConfig::new(10, s, Strategy::Correction(CorrectionConfig::path_wise(&[]).unwrap())), 42).unwrap();
        assert_eq!(base, empty);
    }
}
