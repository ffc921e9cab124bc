//! Few-step samplers and autoregressive chunk rollout.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::correction::{self, CorrectionConfig, CorrectionMode};
use crate::error::{LabError, Result};
use crate::rng::{DrawId, NoiseStream, Purpose};
use crate::schedule::{euler_step, forward_diffuse_unchecked, velocity_from_prediction, NoiseLevel, NoiseSchedule};
use crate::ttx::{self, RewardSpec};
use crate::world::{conditional_prior, Denoiser, Prior, WorldSpec};
use crate::Latent;

/// Which conditioning a denoiser call saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextTag {
    Evolving,
    Reference,
    SinkAugmented,
}

impl ContextTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextTag::Evolving => "evolving",
            ContextTag::Reference => "reference",
            ContextTag::SinkAugmented => "sink-augmented",
        }
    }
}

/// Recent generated chunks plus the frozen first chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkContext {
    window: VecDeque<Latent>,
    reference: Option<Latent>,
    window_size: usize,
    sink_lambda: Option<f64>,
}

impl ChunkContext {
    pub fn new(window_size: usize) -> Self {
        assert!(window_size >= 1, "context window must hold at least one chunk");
        Self {
            window: VecDeque::with_capacity(window_size),
            reference: None,
            window_size,
            sink_lambda: None,
        }
    }

    pub fn window(&self) -> impl ExactSizeIterator<Item = &Latent> {
        self.window.iter()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn reference(&self) -> Option<&Latent> {
        self.reference.as_ref()
    }

    pub fn latest(&self) -> Option<&Latent> {
        self.window.back()
    }

    pub fn sink_lambda(&self) -> Option<f64> {
        self.sink_lambda
    }

    pub(crate) fn with_sink(&self, lambda: f64) -> Self {
        let mut c = self.clone();
        c.sink_lambda = Some(lambda);
        c
    }

    /// Appends a generated chunk. The first chunk ever pushed becomes the reference.
    pub fn push(&mut self, chunk: Latent) {
        if self.reference.is_none() {
            self.reference = Some(chunk.clone());
        }
        if self.window.len() == self.window_size {
            self.window.pop_front();
        }
        self.window.push_back(chunk);
    }

    /// Prior under the evolving context; the initial distribution before any
    /// chunk exists. A sink-augmented context blends in the reference prior.
    pub fn evolving_prior(&self, world: &WorldSpec) -> Prior {
        let base = match self.window.back() {
            None => world.init_prior(),
            Some(last) => conditional_prior(world, last).expect("context chunks match the world"),
        };
        match (self.sink_lambda, &self.reference) {
            (Some(lambda), Some(_)) => base.blend_toward(&self.reference_prior(world), lambda),
            _ => base,
        }
    }

    /// Prior conditioned on the reference chunk alone.
    pub fn reference_prior(&self, world: &WorldSpec) -> Prior {
        match &self.reference {
            None => world.init_prior(),
            Some(r) => conditional_prior(world, r).expect("reference chunk matches the world"),
        }
    }

    pub fn evolving_tag(&self) -> ContextTag {
        if self.sink_lambda.is_some() {
            ContextTag::SinkAugmented
        } else {
            ContextTag::Evolving
        }
    }
}

/// One denoiser invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub level: NoiseLevel,
    pub context_tag: ContextTag,
    pub prediction: Latent,
    pub injected_noise_ids: Vec<DrawId>,
}

/// The two noise sources of one chunk: the path stream (initial noise and one
/// draw per transition) and the correction stream (Phase B draws).
#[derive(Debug, Clone)]
pub struct ChunkDraws {
    pub path: NoiseStream,
    pub correction: NoiseStream,
}

impl ChunkDraws {
    pub fn new(seed: u64, chunk: u64) -> Self {
        Self::candidate(seed, chunk, 0)
    }

    /// Independent draws for candidate `index`; candidate 0 is the ordinary stream.
    pub fn candidate(seed: u64, chunk: u64, index: u64) -> Self {
        Self {
            path: NoiseStream::new(seed, chunk, Purpose::Path, index),
            correction: NoiseStream::new(seed, chunk, Purpose::Correction, index),
        }
    }

    pub fn from_stream(path: NoiseStream) -> Self {
        let correction = NoiseStream::new(path.key(), 0, Purpose::Correction, 0);
        Self { path, correction }
    }
}

pub(crate) fn call(
    denoiser: &Denoiser,
    x: &Latent,
    prior: &Prior,
    level: NoiseLevel,
    tag: ContextTag,
    noise: Vec<DrawId>,
    traces: &mut Vec<StepTrace>,
) -> Latent {
    let prediction = denoiser.eval(x, prior, level);
    traces.push(StepTrace {
        level,
        context_tag: tag,
        prediction: prediction.clone(),
        injected_noise_ids: noise,
    });
    prediction
}

fn require_pure_noise_start(schedule: &NoiseSchedule) -> Result<()> {
    if schedule.top().tau() != 1.0 {
        return Err(LabError::Config(format!(
            "sampling must start from pure noise, schedule starts at {}",
            schedule.top().tau()
        )));
    }
    Ok(())
}

/// Denoise-renoise sampler with the standard evolving context at every level.
pub fn generate_chunk_stochastic(
    denoiser: &Denoiser,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    rng: &mut NoiseStream,
) -> Result<(Latent, Vec<StepTrace>)> {
    let mut draws = ChunkDraws::from_stream(rng.clone());
    let out = sample_with_correction(denoiser, world, context, schedule, &CorrectionConfig::baseline(), &mut draws)?;
    *rng = draws.path;
    Ok(out)
}

/// Stochastic sampler with an optional correction strategy.
///
/// Draw order on the path stream: initial noise, then one draw per transition
/// in schedule order. Path-wise corrections feed that transition draw to
/// Phase A and take their Phase B draw from the correction stream, so an
/// empty correction set consumes exactly the baseline draws.
pub fn sample_with_correction(
    denoiser: &Denoiser,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    config: &CorrectionConfig,
    draws: &mut ChunkDraws,
) -> Result<(Latent, Vec<StepTrace>)> {
    require_pure_noise_start(schedule)?;
    config.validate(schedule)?;
    let ctx = match config.mode {
        CorrectionMode::Sink => correction::sink_augment(context, config.sink_lambda),
        _ => context.clone(),
    };
    let dim = world.chunk_dim();
    let evolving = ctx.evolving_prior(world);
    let tag = ctx.evolving_tag();
    let mut traces = Vec::with_capacity(schedule.len() + config.levels.len());

    let (x, id) = draws.path.normal(dim);
    // Corrections never touch the top level, so the first call is always evolving.
    let mut pred = call(denoiser, &x, &evolving, schedule.top(), tag, vec![id], &mut traces);

    for &level in &schedule.levels()[1..] {
        let (eps, id) = draws.path.normal(dim);
        pred = match config.mode {
            CorrectionMode::PathWise if config.is_corrected(level) => {
                let (p, _) = correction::pathwise_step_with(
                    denoiser, world, &pred, &ctx, level, schedule, (eps, id), &mut draws.correction, &mut traces,
                )?;
                p
            }
            CorrectionMode::SinglePoint if config.is_corrected(level) => {
                let x = forward_diffuse_unchecked(&pred, &eps, level);
                correction::singlepoint_correct_step(denoiser, world, &x, &ctx, level, schedule, vec![id], &mut traces)?
            }
            _ => {
                let x = forward_diffuse_unchecked(&pred, &eps, level);
                call(denoiser, &x, &evolving, level, tag, vec![id], &mut traces)
            }
        };
    }
    Ok((pred, traces))
}

/// Deterministic explicit-Euler sampler; only the initial noise is drawn.
pub fn generate_chunk_ode(
    denoiser: &Denoiser,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    rng: &mut NoiseStream,
) -> Result<(Latent, Vec<StepTrace>)> {
    require_pure_noise_start(schedule)?;
    let prior = context.evolving_prior(world);
    let tag = context.evolving_tag();
    let (mut x, id) = rng.normal(world.chunk_dim());
    let mut ids = vec![id];
    let mut traces = Vec::with_capacity(schedule.len());
    for (j, &level) in schedule.levels().iter().enumerate() {
        let pred = call(denoiser, &x, &prior, level, tag, std::mem::take(&mut ids), &mut traces);
        let v = velocity_from_prediction(&x, &pred, level)?;
        x = euler_step(&x, &v, level, schedule.next_lower(j))?;
    }
    Ok((x, traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    Stochastic,
    Ode,
}

/// How each chunk is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Correction(CorrectionConfig),
    BestOfN { n: usize, reward: RewardSpec },
    SearchOverPath { n: usize, reward: RewardSpec },
}

impl Strategy {
    pub fn baseline() -> Self {
        Strategy::Correction(CorrectionConfig::baseline())
    }

    /// Denoiser calls per chunk.
    pub fn nfe_per_chunk(&self, schedule: &NoiseSchedule) -> usize {
        match self {
            Strategy::Correction(c) => c.nfe_per_chunk(schedule),
            Strategy::BestOfN { n, .. } | Strategy::SearchOverPath { n, .. } => n * schedule.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub n_chunks: usize,
    pub schedule: NoiseSchedule,
    pub window: usize,
    pub sampler: SamplerKind,
    pub strategy: Strategy,
}

impl RolloutConfig {
    pub fn new(n_chunks: usize, schedule: NoiseSchedule, strategy: Strategy) -> Self {
        Self {
            n_chunks,
            schedule,
            window: 3,
            sampler: SamplerKind::Stochastic,
            strategy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chunks == 0 {
            return Err(LabError::Config("n_chunks must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(LabError::Config("context window must be at least 1".into()));
        }
        match &self.strategy {
            Strategy::Correction(c) => {
                c.validate(&self.schedule)?;
                if self.sampler == SamplerKind::Ode && c.mode != CorrectionMode::Baseline {
                    return Err(LabError::Config("corrections require the stochastic sampler".into()));
                }
            }
            Strategy::BestOfN { n, .. } | Strategy::SearchOverPath { n, .. } => {
                if *n == 0 {
                    return Err(LabError::Config("candidate count must be at least 1".into()));
                }
                if self.sampler == SamplerKind::Ode {
                    return Err(LabError::Config("test-time scaling requires the stochastic sampler".into()));
                }
            }
        }
        Ok(())
    }
}

/// A generated sequence with its per-call traces.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub frame_dim: usize,
    pub frames_per_chunk: usize,
    pub chunks: Vec<Latent>,
    /// Index of the last frame of each chunk in the flattened frame sequence.
    pub boundaries: Vec<usize>,
    pub traces: Vec<Vec<StepTrace>>,
    pub chunk_nfe: Vec<usize>,
    pub total_nfe: usize,
    pub seed: u64,
}

impl RolloutRecord {
    pub fn new(frame_dim: usize, frames_per_chunk: usize, seed: u64) -> Self {
        Self {
            frame_dim,
            frames_per_chunk,
            chunks: Vec::new(),
            boundaries: Vec::new(),
            traces: Vec::new(),
            chunk_nfe: Vec::new(),
            total_nfe: 0,
            seed,
        }
    }

    pub fn push(&mut self, chunk: Latent, traces: Vec<StepTrace>, nfe: usize) {
        self.chunks.push(chunk);
        self.boundaries.push(self.chunks.len() * self.frames_per_chunk - 1);
        self.traces.push(traces);
        self.chunk_nfe.push(nfe);
        self.total_nfe += nfe;
    }

    /// Flattened frame sequence.
    pub fn frames(&self) -> Vec<Latent> {
        let d = self.frame_dim;
        self.chunks
            .iter()
            .flat_map(|c| (0..self.frames_per_chunk).map(move |i| c.rows(i * d, d).into_owned()))
            .collect()
    }

    /// One JSON object per chunk.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (k, chunk) in self.chunks.iter().enumerate() {
            let frames: Vec<Vec<f64>> = (0..self.frames_per_chunk)
                .map(|i| chunk.rows(i * self.frame_dim, self.frame_dim).iter().copied().collect())
                .collect();
            let tags: Vec<String> = self.traces[k]
                .iter()
                .map(|t| format!("{}@{}", t.context_tag.as_str(), t.level.tau()))
                .collect();
            let line = ChunkLine {
                chunk: k,
                seed: self.seed,
                frames,
                nfe: self.chunk_nfe[k],
                tags,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads chunks written by [`RolloutRecord::write_jsonl`]. Traces are
    /// restored only as counts, so the result carries empty trace lists.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut rec: Option<RolloutRecord> = None;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ChunkLine = serde_json::from_str(&line)?;
            let f = parsed.frames.len();
            let d = parsed.frames.first().map_or(0, |fr| fr.len());
            let r = rec.get_or_insert_with(|| RolloutRecord::new(d, f, parsed.seed));
            if parsed.chunk != r.chunks.len() || f != r.frames_per_chunk || parsed.frames.iter().any(|fr| fr.len() != d) {
                return Err(LabError::Syntax {
                    line: lineno + 1,
                    message: "chunk records must be consecutive and equally shaped".into(),
                });
            }
            let flat: Vec<f64> = parsed.frames.into_iter().flatten().collect();
            r.push(Latent::from_vec(flat), Vec::new(), parsed.nfe);
        }
        rec.ok_or_else(|| LabError::Syntax { line: 0, message: "empty rollout file".into() })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkLine {
    chunk: usize,
    seed: u64,
    frames: Vec<Vec<f64>>,
    nfe: usize,
    tags: Vec<String>,
}

/// Generates `n_chunks` chunks autoregressively. Chunk `t` draws from the
/// substreams keyed by `(seed, t)`.
pub fn rollout(denoiser: &Denoiser, world: &WorldSpec, config: &RolloutConfig, seed: u64) -> Result<RolloutRecord> {
    rollout_from(denoiser, world, config, seed, &mut ChunkContext::new(config.window), 0)
}

/// Continues a rollout from an existing context, numbering chunks from `start`.
pub(crate) fn rollout_from(
    denoiser: &Denoiser,
    world: &WorldSpec,
    config: &RolloutConfig,
    seed: u64,
    ctx: &mut ChunkContext,
    start: usize,
) -> Result<RolloutRecord> {
    config.validate()?;
    let mut record = RolloutRecord::new(world.frame_dim, world.frames_per_chunk, seed);
    for t in start..config.n_chunks {
        let (chunk, traces) = generate_one(denoiser, world, config, ctx, seed, t as u64)?;
        let nfe = traces.len();
        ctx.push(chunk.clone());
        record.push(chunk, traces, nfe);
    }
    Ok(record)
}

pub(crate) fn generate_one(
    denoiser: &Denoiser,
    world: &WorldSpec,
    config: &RolloutConfig,
    ctx: &ChunkContext,
    seed: u64,
    t: u64,
) -> Result<(Latent, Vec<StepTrace>)> {
    let schedule = &config.schedule;
    match (&config.strategy, config.sampler) {
        (Strategy::Correction(_), SamplerKind::Ode) => {
            let mut draws = ChunkDraws::new(seed, t);
            generate_chunk_ode(denoiser, world, ctx, schedule, &mut draws.path)
        }
        (Strategy::Correction(c), SamplerKind::Stochastic) => {
            let mut draws = ChunkDraws::new(seed, t);
            sample_with_correction(denoiser, world, ctx, schedule, c, &mut draws)
        }
        (Strategy::BestOfN { n, reward }, _) => {
            let bound = reward.bind(ctx, world);
            ttx::best_of_n_chunk(denoiser, world, ctx, schedule, &bound, *n, seed, t)
        }
        (Strategy::SearchOverPath { n, reward }, _) => {
            let bound = reward.bind(ctx, world);
            let mut draws = ChunkDraws::new(seed, t);
            let mut search = NoiseStream::new(seed, t, Purpose::Search, 0);
            ttx::search_over_path(denoiser, world, ctx, schedule, &bound, *n, &mut draws.path, &mut search)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{ConditionalPrior, WorldSpec};
    use nalgebra::{DMatrix, DVector};

    fn small_world(var: f64) -> WorldSpec {
        let n = 6;
        WorldSpec::new(
            3,
            2,
            DMatrix::identity(n, n) * 0.8,
            DVector::from_element(n, 0.2),
            DVector::from_element(n, var),
            DVector::from_element(n, 1.0),
            DVector::from_element(n, var),
            None,
            true,
        )
        .unwrap()
    }

    fn ctx_with(world: &WorldSpec, chunks: &[Latent]) -> ChunkContext {
        let mut c = ChunkContext::new(3);
        for ch in chunks {
            c.push(ch.clone());
        }
        let _ = world;
        c
    }

    #[test]
    fn default_schedule_makes_four_calls() {
        let w = small_world(0.1);
        let ctx = ctx_with(&w, &[DVector::from_element(6, 1.0)]);
        let mut rng = NoiseStream::new(3, 1, Purpose::Path, 0);
        let (_, traces) = generate_chunk_stochastic(&Denoiser::Exact, &w, &ctx, &NoiseSchedule::default(), &mut rng).unwrap();
        assert_eq!(traces.len(), 4);
        assert!(traces.iter().all(|t| t.context_tag == ContextTag::Evolving));
        assert_eq!(rng.drawn(), 4);
    }

    #[test]
    fn degenerate_prior_returns_mean() {
        let w = small_world(0.0);
        let prev = DVector::from_fn(6, |i, _| i as f64 * 0.1);
        let ctx = ctx_with(&w, &[prev]);
        let mu = ctx.evolving_prior(&w).mean();
        for seed in 0..5 {
            let mut rng = NoiseStream::new(seed, 1, Purpose::Path, 0);
            let (out, _) = generate_chunk_stochastic(&Denoiser::Exact, &w, &ctx, &NoiseSchedule::default(), &mut rng).unwrap();
            assert!((&out - &mu).amax() < 1e-15);
            let mut rng = NoiseStream::new(seed, 1, Purpose::Path, 0);
            let (out, _) = generate_chunk_ode(&Denoiser::Exact, &w, &ctx, &NoiseSchedule::default(), &mut rng).unwrap();
            assert!((&out - &mu).amax() < 1e-12);
        }
    }

    #[test]
    fn single_level_returns_prior_mean() {
        let w = small_world(0.3);
        let ctx = ctx_with(&w, &[DVector::from_element(6, 0.5)]);
        let sched = crate::schedule::make_rf_schedule(&[1.0]).unwrap();
        let mut rng = NoiseStream::new(9, 1, Purpose::Path, 0);
        let (out, traces) = generate_chunk_stochastic(&Denoiser::Exact, &w, &ctx, &sched, &mut rng).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(out, ctx.evolving_prior(&w).mean());
    }

    #[test]
    fn schedule_must_start_at_pure_noise() {
        let w = small_world(0.3);
        let ctx = ChunkContext::new(2);
        let sched = crate::schedule::make_rf_schedule(&[0.9, 0.5]).unwrap();
        let mut rng = NoiseStream::new(9, 1, Purpose::Path, 0);
        assert!(matches!(
            generate_chunk_stochastic(&Denoiser::Exact, &w, &ctx, &sched, &mut rng),
            Err(LabError::Config(_))
        ));
        assert!(generate_chunk_ode(&Denoiser::Exact, &w, &ctx, &sched, &mut rng).is_err());
    }

    #[test]
    fn ode_is_deterministic() {
        let w = small_world(0.3);
        let ctx = ctx_with(&w, &[DVector::from_element(6, 0.5)]);
        let run = || {
            let mut rng = NoiseStream::new(4, 1, Purpose::Path, 0);
            generate_chunk_ode(&Denoiser::Exact, &w, &ctx, &NoiseSchedule::uniform(8).unwrap(), &mut rng).unwrap().0
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn context_window_and_reference() {
        let mut c = ChunkContext::new(3);
        assert!(c.reference().is_none());
        for t in 0..6 {
            c.push(DVector::from_element(2, t as f64));
            assert_eq!(c.len(), (t + 1).min(3));
            assert_eq!(c.latest().unwrap()[0], t as f64);
            assert_eq!(c.reference().unwrap()[0], 0.0);
        }
        let order: Vec<f64> = c.window().map(|x| x[0]).collect();
        assert_eq!(order, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn rollout_accounting() {
        let w = small_world(0.1);
        let cfg = RolloutConfig::new(30, NoiseSchedule::default(), Strategy::baseline());
        let rec = rollout(&Denoiser::Exact, &w, &cfg, 1).unwrap();
        assert_eq!(rec.total_nfe, 120);
        assert_eq!(rec.chunks.len(), 30);
        assert_eq!(rec.boundaries.len(), 30);
        assert!(rec.boundaries.windows(2).all(|b| b[1] > b[0]));
        assert_eq!(rec.boundaries[0], 1);
        assert_eq!(rec.frames().len(), 60);
        assert_eq!(rec.chunk_nfe.iter().sum::<usize>(), rec.total_nfe);
    }

    #[test]
    fn pathwise_rollout_costs_six_per_chunk() {
        let w = small_world(0.1);
        let cfg = RolloutConfig::new(30, NoiseSchedule::default(), Strategy::Correction(CorrectionConfig::path_wise(&[0.5, 0.25]).unwrap()));
        let rec = rollout(&Denoiser::Exact, &w, &cfg, 1).unwrap();
        assert_eq!(rec.total_nfe, 180);
    }

    #[test]
    fn invalid_rollout_configs() {
        let w = small_world(0.1);
        let bad = RolloutConfig::new(3, NoiseSchedule::default(), Strategy::Correction(CorrectionConfig::path_wise(&[0.6]).unwrap()));
        assert!(rollout(&Denoiser::Exact, &w, &bad, 1).is_err());
        let zero = RolloutConfig::new(0, NoiseSchedule::default(), Strategy::baseline());
        assert!(rollout(&Denoiser::Exact, &w, &zero, 1).is_err());
        let mut ode = RolloutConfig::new(3, NoiseSchedule::default(), Strategy::Correction(CorrectionConfig::path_wise(&[0.5]).unwrap()));
        ode.sampler = SamplerKind::Ode;
        assert!(rollout(&Denoiser::Exact, &w, &ode, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let w = small_world(0.1);
        let cfg = RolloutConfig::new(4, NoiseSchedule::default(), Strategy::baseline());
        let rec = rollout(&Denoiser::Exact, &w, &cfg, 8).unwrap();
        let mut buf = Vec::new();
        rec.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().contains("\"evolving@1\""));
        let back = RolloutRecord::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.chunks, rec.chunks);
        assert_eq!(back.boundaries, rec.boundaries);
        assert_eq!(back.total_nfe, rec.total_nfe);
    }

    #[test]
    fn stochastic_sampler_is_unbiased_for_gaussian_posterior() {
        // Per-coordinate mean of 1e5 chunks against the analytic conditional mean.
        let w = small_world(0.2);
        let prev = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.5);
        let ctx = ctx_with(&w, &[prev]);
        let prior: ConditionalPrior = ctx.evolving_prior(&w).moment_matched();
        let n = 100_000;
        let sched = NoiseSchedule::default();
        let mut sum = DVector::zeros(6);
        let mut sq = DVector::zeros(6);
        let mut rng = NoiseStream::new(77, 0, Purpose::Oracle, 0);
        for _ in 0..n {
            let (out, _) = generate_chunk_stochastic(&Denoiser::Exact, &w, &ctx, &sched, &mut rng).unwrap();
            sum += &out;
            sq += out.map(|x| x * x);
        }
        for i in 0..6 {
            let m = sum[i] / n as f64;
            let var = sq[i] / n as f64 - m * m;
            let se = (var / n as f64).sqrt();
            assert!((m - prior.mean[i]).abs() < 5.0 * se, "coord {i}: {m} vs {}", prior.mean[i]);
        }
    }
}
