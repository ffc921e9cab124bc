//! Test-time scaling (Best-of-N, Search-over-Path) and test-time optimization
//! of a low-rank output adapter.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::correction::CorrectionConfig;
use crate::error::{LabError, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::metrics::FrameEncoder;
use crate::rng::{NoiseStream, Purpose};
use crate::sampler::{
    call, generate_one, rollout_from, sample_with_correction, ChunkContext, ChunkDraws, RolloutConfig, RolloutRecord,
    StepTrace,
};
use crate::schedule::{forward_diffuse_unchecked, NoiseSchedule};
use crate::world::{Denoiser, LowRankAdapter, WorldSpec};
use crate::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// `-||x - S_0||^2 / n`: reproduce the reference chunk.
    Reconstruction,
    /// Mean per-frame cosine to the reference frames in an encoder space.
    Semantic,
    /// `-||x - mu(S_0)||^2 / n` where `mu(S_0)` is the reference-conditioned prior mean.
    #[default]
    DriftPenalty,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Reconstruction => "reconstruction",
            RewardKind::Semantic => "semantic",
            RewardKind::DriftPenalty => "drift-penalty",
        }
    }
}

/// Reward family; the reference is taken from the context when bound.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Required for [`RewardKind::Semantic`].
    pub encoder: Option<FrameEncoder>,
}

impl RewardSpec {
    pub fn reconstruction() -> Self {
        Self { kind: RewardKind::Reconstruction, encoder: None }
    }

    pub fn drift_penalty() -> Self {
        Self { kind: RewardKind::DriftPenalty, encoder: None }
    }

    pub fn semantic(encoder: FrameEncoder) -> Self {
        Self { kind: RewardKind::Semantic, encoder: Some(encoder) }
    }

    /// Fixes the reference for the next chunk generated under `context`.
    /// Before any chunk exists the world's initial mean stands in for `S_0`.
    pub fn bind(&self, context: &ChunkContext, world: &WorldSpec) -> BoundReward<'_> {
        let reference = match self.kind {
            RewardKind::DriftPenalty => context.reference_prior(world).mean(),
            RewardKind::Reconstruction | RewardKind::Semantic => {
                context.reference().cloned().unwrap_or_else(|| world.init_mean.clone())
            }
        };
        BoundReward::new(self.kind, reference, self.encoder.as_ref(), world.frame_dim)
    }
}

/// A reward with its reference fixed; a deterministic function of a chunk.
#[derive(Debug, Clone)]
pub struct BoundReward<'a> {
    kind: RewardKind,
    reference: Latent,
    encoder: Option<&'a FrameEncoder>,
    frame_dim: usize,
    ref_embeddings: Vec<Latent>,
}

fn frame(x: &Latent, i: usize, d: usize) -> Latent {
    x.rows(i * d, d).into_owned()
}

impl<'a> BoundReward<'a> {
    /// Panics if a semantic reward has no encoder.
    pub fn new(kind: RewardKind, reference: Latent, encoder: Option<&'a FrameEncoder>, frame_dim: usize) -> Self {
        let ref_embeddings = match kind {
            RewardKind::Semantic => {
                let enc = encoder.expect("semantic reward needs an encoder");
                (0..reference.len() / frame_dim)
                    .map(|i| enc.encode(&frame(&reference, i, frame_dim)))
                    .collect()
            }
            _ => Vec::new(),
        };
        Self { kind, reference, encoder, frame_dim, ref_embeddings }
    }

    pub fn reference(&self) -> &Latent {
        &self.reference
    }

    pub fn score(&self, x: &Latent) -> f64 {
        match self.kind {
            RewardKind::Reconstruction | RewardKind::DriftPenalty => {
                -(x - &self.reference).norm_squared() / x.len() as f64
            }
            RewardKind::Semantic => {
                let enc = self.encoder.expect("semantic reward needs an encoder");
                let total: f64 = self
                    .ref_embeddings
                    .iter()
                    .enumerate()
                    .map(|(i, zr)| cosine(&enc.encode(&frame(x, i, self.frame_dim)), zr))
                    .sum();
                total / self.ref_embeddings.len() as f64
            }
        }
    }

    /// Gradient of [`Self::score`] with respect to the chunk.
    pub fn grad(&self, x: &Latent) -> Latent {
        match self.kind {
            RewardKind::Reconstruction | RewardKind::DriftPenalty => {
                (x - &self.reference) * (-2.0 / x.len() as f64)
            }
            RewardKind::Semantic => {
                let enc = self.encoder.expect("semantic reward needs an encoder");
                let d = self.frame_dim;
                let k = self.ref_embeddings.len() as f64;
                let mut g = Latent::zeros(x.len());
                for (i, zr) in self.ref_embeddings.iter().enumerate() {
                    let f = frame(x, i, d);
                    let z = enc.encode(&f);
                    let dz = cosine_grad(&z, zr);
                    let gf = enc.jacobian(&f).transpose() * dz / k;
                    g.rows_mut(i * d, d).copy_from(&gf);
                }
                g
            }
        }
    }
}

fn cosine(a: &Latent, b: &Latent) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}

/// `d cos(a, b) / da`.
fn cosine_grad(a: &Latent, b: &Latent) -> Latent {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Latent::zeros(a.len());
    }
    b / (na * nb) - a * (a.dot(b) / (na * na * na * nb))
}

/// Index of the first maximum.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Result of a selection among candidates.
#[derive(Debug, Clone)]
pub struct Selection {
    pub chunk: Latent,
    pub index: usize,
    pub reward: f64,
    pub rewards: Vec<f64>,
    pub traces: Vec<StepTrace>,
    pub nfe: usize,
}

/// Generates `n` candidates with `generator(i)`, scores them and keeps the
/// first maximizer. Candidates are independent and may run concurrently.
pub fn best_of_n<G>(generator: G, reward: &BoundReward, n: usize, mode: ExecMode) -> Result<Selection>
where
    G: Fn(usize) -> Result<(Latent, Vec<StepTrace>)> + Sync + Send,
{
    if n == 0 {
        return Err(LabError::Config("best-of-n needs at least one candidate".into()));
    }
    let candidates = map_indexed(n, mode, generator).into_iter().collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = candidates.iter().map(|(c, _)| reward.score(c)).collect();
    let index = argmax(&rewards);
    let mut traces = Vec::new();
    let mut chunk = None;
    for (i, (c, t)) in candidates.into_iter().enumerate() {
        if i == index {
            chunk = Some(c);
        }
        traces.extend(t);
    }
    Ok(Selection {
        chunk: chunk.expect("argmax is a valid index"),
        index,
        reward: rewards[index],
        rewards,
        nfe: traces.len(),
        traces,
    })
}

/// Best-of-N over baseline chunk generations; candidate `i` uses the draws
/// keyed `(seed, chunk, i)`, so candidate 0 is the ordinary baseline chunk.
#[allow(clippy::too_many_arguments)]
pub fn best_of_n_chunk(
    denoiser: &Denoiser,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    reward: &BoundReward,
    n: usize,
    seed: u64,
    chunk: u64,
) -> Result<(Latent, Vec<StepTrace>)> {
    let baseline = CorrectionConfig::baseline();
    let sel = best_of_n(
        |i| {
            let mut draws = ChunkDraws::candidate(seed, chunk, i as u64);
            sample_with_correction(denoiser, world, context, schedule, &baseline, &mut draws)
        },
        reward,
        n,
        ExecMode::default(),
    )?;
    Ok((sel.chunk, sel.traces))
}

/// Greedy per-level search. At the top level and at every transition `n`
/// noise candidates are drawn (the first from `path`, the rest from
/// `search`), each is denoised and the clean prediction with the highest
/// reward is kept.
#[allow(clippy::too_many_arguments)]
pub fn search_over_path(
    denoiser: &Denoiser,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    reward: &BoundReward,
    n: usize,
    path: &mut NoiseStream,
    search: &mut NoiseStream,
) -> Result<(Latent, Vec<StepTrace>)> {
    if n == 0 {
        return Err(LabError::Config("search-over-path needs at least one candidate".into()));
    }
    if schedule.top().tau() != 1.0 {
        return Err(LabError::Config("sampling must start from pure noise".into()));
    }
    let dim = world.chunk_dim();
    let prior = context.evolving_prior(world);
    let tag = context.evolving_tag();
    let mut traces = Vec::with_capacity(n * schedule.len());
    let mut current: Option<Latent> = None;
    for &level in schedule.levels() {
        let mut best: Option<(f64, Latent)> = None;
        for i in 0..n {
            let (eps, id) = if i == 0 { path.normal(dim) } else { search.normal(dim) };
            let x = match &current {
                None => eps,
                Some(pred) => forward_diffuse_unchecked(pred, &eps, level),
            };
            let pred = call(denoiser, &x, &prior, level, tag, vec![id], &mut traces);
            let r = reward.score(&pred);
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, pred));
            }
        }
        current = best.map(|(_, p)| p);
    }
    Ok((current.expect("schedule is non-empty"), traces))
}

pub const DEFAULT_STEP_SIZE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-4;

/// Update rule for the adapter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// `theta += step_size * grad`.
    #[default]
    GradientAscent,
    /// Adaptive moments with `beta = (0.9, 0.999)`, `eps = 1e-8`.
    Adam,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::GradientAscent => "gradient-ascent",
            Optimizer::Adam => "adam",
        }
    }
}

/// Low-rank adapter optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub rank: usize,
    pub optimizer: Optimizer,
    /// Chunks sampled per iteration; the gradient is their average.
    pub batch: usize,
    pub step_size: f64,
    pub steps: usize,
    /// Weight of the `||deltas||^2` penalty.
    pub prox: f64,
    /// Scale of the random initial `right` factor; `left` starts at zero.
    pub init_scale: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 4,
            optimizer: Optimizer::GradientAscent,
            batch: 1,
            step_size: DEFAULT_STEP_SIZE,
            steps: 200,
            prox: 0.0,
            init_scale: 1.0,
        }
    }
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(LabError::Config("adapter rank must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(LabError::Config("adapter batch must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(LabError::Config("adapter step size must be positive".into()));
        }
        if !(self.prox >= 0.0) || !self.prox.is_finite() {
            return Err(LabError::Config("proximal weight must be non-negative".into()));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(LabError::Config("adapter init scale must be non-negative".into()));
        }
        Ok(())
    }

    /// `left = 0`, `right` Gaussian with entries of std `init_scale / sqrt(dim)`.
    pub fn init(&self, dim: usize, rng: &mut NoiseStream) -> LowRankAdapter {
        let mut a = LowRankAdapter::zeros(dim, self.rank);
        let s = self.init_scale / (dim as f64).sqrt();
        a.right = DMatrix::from_fn(self.rank, dim, |_, _| s * rng.scalar_normal());
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub struct TtoOutcome {
    pub denoiser: Denoiser,
    /// Reward of the chunk generated at each iteration, before its update.
    pub rewards: Vec<f64>,
    pub gradient_mode: Option<GradientMode>,
}

/// Baseline chunk with the adapter `adapter` applied to `inner`, on fixed draws.
fn adapted_chunk(
    inner: &Denoiser,
    adapter: &LowRankAdapter,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    draws: &ChunkDraws,
) -> Result<Latent> {
    let den = Denoiser::adapted(inner.clone(), adapter.clone());
    let mut d = draws.clone();
    Ok(sample_with_correction(&den, world, context, schedule, &CorrectionConfig::baseline(), &mut d)?.0)
}

/// Reward of the adapted baseline chunk and its gradient with respect to the
/// adapter parameters (flat, see [`LowRankAdapter::params`]).
#[allow(clippy::too_many_arguments)]
pub fn reward_gradient(
    inner: &Denoiser,
    adapter: &LowRankAdapter,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    reward: &BoundReward,
    draws: &ChunkDraws,
    mode: GradientMode,
) -> Result<(f64, Vec<f64>)> {
    match mode {
        GradientMode::Analytic => analytic_gradient(inner, adapter, world, context, schedule, reward, draws),
        GradientMode::FiniteDifference => {
            let value = reward.score(&adapted_chunk(inner, adapter, world, context, schedule, draws)?);
            let base = adapter.params();
            let mut probe = adapter.clone();
            let mut grad = Vec::with_capacity(base.len());
            let mut p = base.clone();
            for k in 0..base.len() {
                p[k] = base[k] + FD_STEP;
                probe.set_params(&p);
                let up = reward.score(&adapted_chunk(inner, &probe, world, context, schedule, draws)?);
                p[k] = base[k] - FD_STEP;
                probe.set_params(&p);
                let down = reward.score(&adapted_chunk(inner, &probe, world, context, schedule, draws)?);
                p[k] = base[k];
                grad.push((up - down) / (2.0 * FD_STEP));
            }
            Ok((value, grad))
        }
    }
}

/// Reverse-mode pass through the baseline sampler. Valid when `inner` is
/// affine in its input under the context prior.
fn analytic_gradient(
    inner: &Denoiser,
    adapter: &LowRankAdapter,
    world: &WorldSpec,
    context: &ChunkContext,
    schedule: &NoiseSchedule,
    reward: &BoundReward,
    draws: &ChunkDraws,
) -> Result<(f64, Vec<f64>)> {
    let prior = context.evolving_prior(world);
    if !inner.is_affine(&prior) {
        return Err(LabError::Config("analytic adapter gradient needs an affine denoiser".into()));
    }
    let dim = world.chunk_dim();
    let mut path = draws.path.clone();
    let levels = schedule.levels();
    let mut inner_out = Vec::with_capacity(levels.len());
    let mut pred = Latent::zeros(dim);
    for (j, &level) in levels.iter().enumerate() {
        let eps = path.normal_vec(dim);
        let x = if j == 0 { eps } else { forward_diffuse_unchecked(&pred, &eps, level) };
        let u = inner.eval(&x, &prior, level);
        pred = adapter.apply(&u);
        inner_out.push(u);
    }
    let value = reward.score(&pred);

    let mut g = reward.grad(&pred);
    let mut g_left = DMatrix::zeros(adapter.left.nrows(), adapter.left.ncols());
    let mut g_right = DMatrix::zeros(adapter.right.nrows(), adapter.right.ncols());
    for j in (0..levels.len()).rev() {
        let u = &inner_out[j];
        let ru = &adapter.right * u;
        let ltg = adapter.left.transpose() * &g;
        g_left += &g * ru.transpose();
        g_right += &ltg * u.transpose();
        if j > 0 {
            let c_u = &g + adapter.right.transpose() * &ltg;
            let c_x = inner.vjp(&c_u, &prior, levels[j]).expect("affine denoiser has a vjp");
            g = c_x * levels[j].alpha();
        }
    }
    let grad = g_left.iter().chain(g_right.iter()).copied().collect();
    Ok((value, grad))
}

/// Gradient ascent on `reward - prox * ||deltas||^2` over the adapter of
/// `inner`, using baseline chunks generated after `context`.
///
/// Iteration `k` samples its chunk from the adaptation stream keyed
/// `(seed, k)`. The penalty is applied as a proximal step, which stays stable
/// for any weight.
pub fn tto_finetune(
    inner: &Denoiser,
    spec: &AdapterSpec,
    reward: &RewardSpec,
    world: &WorldSpec,
    config: &RolloutConfig,
    context: &ChunkContext,
    seed: u64,
) -> Result<TtoOutcome> {
    spec.validate()?;
    if spec.steps == 0 {
        return Ok(TtoOutcome { denoiser: inner.clone(), rewards: Vec::new(), gradient_mode: None });
    }
    let schedule = &config.schedule;
    let bound = reward.bind(context, world);
    let mode = if inner.is_affine(&context.evolving_prior(world)) {
        GradientMode::Analytic
    } else {
        GradientMode::FiniteDifference
    };
    let mut adapter = spec.init(world.chunk_dim(), &mut NoiseStream::new(seed, 0, Purpose::AdapterInit, 0));
    let mut params = adapter.params();
    let mut rewards = Vec::with_capacity(spec.steps);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    for k in 0..spec.steps {
        let samples = map_indexed(spec.batch, ExecMode::default(), |b| {
            let draws = ChunkDraws::from_stream(NoiseStream::new(seed, k as u64, Purpose::Adapt, b as u64));
            reward_gradient(inner, &adapter, world, context, schedule, &bound, &draws, mode)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / spec.batch as f64;
        let value = samples.iter().map(|(v, _)| v).sum::<f64>() * scale;
        let mut grad = vec![0.0; params.len()];
        for (_, g) in &samples {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b * scale;
            }
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(LabError::NonFinite(format!(
                "test-time optimization diverged at iteration {k}: reward {value}, previous rewards {:?}",
                &rewards[rewards.len().saturating_sub(5)..]
            )));
        }
        rewards.push(value);
        let lr = spec.step_size;
        let shrink = 1.0 / (1.0 + 2.0 * lr * spec.prox);
        match spec.optimizer {
            Optimizer::GradientAscent => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p = (*p + lr * g) * shrink;
                }
            }
            Optimizer::Adam => {
                let (c1, c2) = (1.0 - b1.powi(k as i32 + 1), 1.0 - b2.powi(k as i32 + 1));
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    params[i] = (params[i] + lr * step) * shrink;
                }
            }
        }
        adapter.set_params(&params);
    }
    Ok(TtoOutcome {
        denoiser: Denoiser::adapted(inner.clone(), adapter),
        rewards,
        gradient_mode: Some(mode),
    })
}

/// Rollout with test-time optimization: chunk 0 comes from `inner`, the
/// adapter is then fitted on the context `[chunk 0]` and generates the rest.
/// Generation draws are shared with [`crate::sampler::rollout`].
pub fn tto_rollout(
    inner: &Denoiser,
    spec: &AdapterSpec,
    reward: &RewardSpec,
    world: &WorldSpec,
    config: &RolloutConfig,
    seed: u64,
) -> Result<(RolloutRecord, TtoOutcome)> {
    config.validate()?;
    let mut ctx = ChunkContext::new(config.window);
    let (first, traces) = generate_one(inner, world, config, &ctx, seed, 0)?;
    ctx.push(first.clone());
    let outcome = tto_finetune(inner, spec, reward, world, config, &ctx, seed)?;
    let rest = rollout_from(&outcome.denoiser, world, config, seed, &mut ctx, 1)?;
    let mut record = RolloutRecord::new(world.frame_dim, world.frames_per_chunk, seed);
    let nfe = traces.len();
    record.push(first, traces, nfe);
    for ((chunk, traces), nfe) in rest.chunks.into_iter().zip(rest.traces).zip(rest.chunk_nfe) {
        record.push(chunk, traces, nfe);
    }
    Ok((record, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{rollout, Strategy};
    use crate::schedule::NoiseSchedule;
    use crate::world::FrameDynamics;
    use nalgebra::DVector;

    fn world() -> WorldSpec {
        WorldSpec::from_dynamics(&FrameDynamics {
            frame_dim: 3,
            frames_per_chunk: 2,
            persistence: 0.9,
            rotation: 0.3,
            mean_frame: DVector::from_column_slice(&[1.0, 0.5, -0.5]),
            process_var: DVector::from_element(3, 0.05),
            init_var: DVector::from_element(3, 0.1),
        })
        .unwrap()
    }

    fn drifting() -> Denoiser {
        Denoiser::biased(Denoiser::Exact, 1.02, Latent::zeros(6))
    }

    fn cfg(strategy: Strategy) -> RolloutConfig {
        RolloutConfig::new(6, NoiseSchedule::default(), strategy)
    }

    #[test]
    fn single_candidate_matches_baseline() {
        let w = world();
        let base = rollout(&drifting(), &w, &cfg(Strategy::baseline()), 11).unwrap();
        for strategy in [
            Strategy::BestOfN { n: 1, reward: RewardSpec::drift_penalty() },
            Strategy::SearchOverPath { n: 1, reward: RewardSpec::drift_penalty() },
        ] {
            let r = rollout(&drifting(), &w, &cfg(strategy), 11).unwrap();
            assert_eq!(r.chunks, base.chunks);
            assert_eq!(r.total_nfe, base.total_nfe);
        }
    }

    #[test]
    fn five_candidates_cost_five_times() {
        let w = world();
        for strategy in [
            Strategy::BestOfN { n: 5, reward: RewardSpec::drift_penalty() },
            Strategy::SearchOverPath { n: 5, reward: RewardSpec::drift_penalty() },
        ] {
            let r = rollout(&drifting(), &w, &cfg(strategy), 3).unwrap();
            assert!(r.chunk_nfe.iter().all(|&n| n == 20));
        }
    }

    #[test]
    fn best_of_n_picks_first_maximum() {
        let reference = Latent::zeros(2);
        let reward = BoundReward::new(RewardKind::Reconstruction, reference, None, 1);
        let chunks = [[1.0, 0.0], [0.5, 0.0], [0.0, 0.5], [2.0, 0.0]];
        let sel = best_of_n(
            |i| Ok((Latent::from_column_slice(&chunks[i]), Vec::new())),
            &reward,
            4,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(sel.index, 1);
        assert!(sel.rewards.iter().all(|&r| sel.reward >= r));

        // Constant reward: a semantic score against a zero reference is always 0.
        let enc = FrameEncoder::identity(1);
        let flat = BoundReward::new(RewardKind::Semantic, Latent::zeros(2), Some(&enc), 1);
        let sel = best_of_n(
            |i| Ok((Latent::from_column_slice(&chunks[i]), Vec::new())),
            &flat,
            4,
            ExecMode::Parallel,
        )
        .unwrap();
        assert_eq!(sel.index, 0);
    }

    #[test]
    fn reward_gradients_match_finite_differences() {
        let enc = FrameEncoder::nonlinear(3, 8, 5, 2);
        let x = DVector::from_fn(6, |i, _| (i as f64 + 0.3).sin());
        let r = Latent::from_element(6, 0.2);
        for kind in [RewardKind::Reconstruction, RewardKind::Semantic] {
            let b = BoundReward::new(kind, r.clone(), Some(&enc), 3);
            let g = b.grad(&x);
            for k in 0..6 {
                let mut p = x.clone();
                p[k] += 1e-6;
                let mut m = x.clone();
                m[k] -= 1e-6;
                let fd = (b.score(&p) - b.score(&m)) / 2e-6;
                assert!((fd - g[k]).abs() < 1e-8, "{kind:?} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    fn adaptation_setup() -> (WorldSpec, ChunkContext, RolloutConfig) {
        let w = world();
        let config = cfg(Strategy::baseline());
        let base = rollout(&drifting(), &w, &config, 5).unwrap();
        let mut ctx = ChunkContext::new(3);
        ctx.push(base.chunks[0].clone());
        (w, ctx, config)
    }

    #[test]
    fn adapter_gradient_analytic_matches_finite_differences() {
        let (w, ctx, config) = adaptation_setup();
        let mut adapter = AdapterSpec { rank: 2, init_scale: 0.5, ..Default::default() }
            .init(w.chunk_dim(), &mut NoiseStream::from_seed(1));
        let mut p = adapter.params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 1.7).cos();
        }
        adapter.set_params(&p);
        let draws = ChunkDraws::from_stream(NoiseStream::from_seed(2));
        let enc = FrameEncoder::nonlinear(3, 8, 5, 4);
        for spec in [RewardSpec::reconstruction(), RewardSpec::drift_penalty(), RewardSpec::semantic(enc)] {
            let bound = spec.bind(&ctx, &w);
            let (va, ga) = reward_gradient(
                &drifting(), &adapter, &w, &ctx, &config.schedule, &bound, &draws, GradientMode::Analytic,
            )
            .unwrap();
            let (vf, gf) = reward_gradient(
                &drifting(), &adapter, &w, &ctx, &config.schedule, &bound, &draws, GradientMode::FiniteDifference,
            )
            .unwrap();
            assert_eq!(va, vf);
            let num: f64 = ga.iter().zip(&gf).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = ga.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < 1e-5, "{:?}: relative error {}", spec.kind, num / den);
        }
    }

    #[test]
    fn zero_steps_leave_denoiser_unchanged() {
        let (w, ctx, config) = adaptation_setup();
        let spec = AdapterSpec { steps: 0, ..Default::default() };
        let out = tto_finetune(&drifting(), &spec, &RewardSpec::reconstruction(), &w, &config, &ctx, 1).unwrap();
        assert_eq!(out.denoiser, drifting());
        assert!(out.rewards.is_empty());
    }

    #[test]
    fn large_proximal_weight_pins_adapter() {
        let (w, ctx, config) = adaptation_setup();
        let spec = AdapterSpec { steps: 50, step_size: 0.5, prox: 1e6, ..Default::default() };
        let out = tto_finetune(&drifting(), &spec, &RewardSpec::reconstruction(), &w, &config, &ctx, 1).unwrap();
        let a = out.denoiser.adapter().unwrap();
        let delta = &a.left * &a.right;
        assert!(delta.norm() <= 1e-3);
        assert!(a.left.norm() <= 1e-3);
    }

    #[test]
    fn reconstruction_ascent_increases_reward() {
        let (w, ctx, config) = adaptation_setup();
        let spec = AdapterSpec { steps: 100, step_size: 0.5, rank: 6, ..Default::default() };
        let out = tto_finetune(&drifting(), &spec, &RewardSpec::reconstruction(), &w, &config, &ctx, 1).unwrap();
        let head: f64 = out.rewards[..10].iter().sum();
        let tail: f64 = out.rewards[90..].iter().sum();
        assert!(tail > head, "{head} -> {tail}");
    }

    #[test]
    fn non_finite_reward_aborts() {
        let (w, ctx, config) = adaptation_setup();
        let spec = AdapterSpec { steps: 50, step_size: 1e12, ..Default::default() };
        let err = tto_finetune(&drifting(), &spec, &RewardSpec::reconstruction(), &w, &config, &ctx, 1).unwrap_err();
        assert!(matches!(err, LabError::NonFinite(_)));
    }
}
