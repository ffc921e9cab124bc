//! Scenario files: a flat TOML document with one table per concern.
//!
//! ```toml
//! name = "ttc"
//! n_chunks = 30
//! n_seeds = 200
//! schedule = [1.0, 0.75, 0.5, 0.25]
//!
//! [drift]
//! gain = 1.02
//!
//! [correction]
//! mode = "path-wise"
//! levels = [0.5, 0.25]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::correction::{CorrectionConfig, CorrectionMode, DEFAULT_SINK_LAMBDA};
use crate::error::{LabError, Result};
use crate::metrics::{ChannelMap, DistanceKind, EncoderChoice, FrameEncoder, MetricSuite, SUMMARY_FIELDS};
use crate::sampler::{RolloutConfig, SamplerKind, Strategy};
use crate::schedule::{make_rf_schedule, NoiseLevel};
use crate::ttx::{AdapterSpec, Optimizer, RewardKind, RewardSpec};
use crate::world::{Denoiser, FrameDynamics, MixtureSpec, WorldSpec};

pub const DEFAULT_SCHEDULE: [f64; 4] = [1.0, 0.75, 0.5, 0.25];

/// Repeated (and scaled by `world.mean_scale`) to fill the mean frame.
const MEAN_PATTERN: [f64; 8] = [1.0, 0.5, -0.5, 0.8, 0.3, -0.7, 0.6, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Plain sampling or one of the reference-guided corrections.
    #[default]
    Correction,
    /// Best-of-N or Search-over-Path, see `[tts]`.
    Tts,
    /// Adapter fine-tuning on the first chunk, see `[tto]`.
    Tto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TtsMode {
    #[default]
    Bon,
    Sop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub n_chunks: usize,
    pub n_seeds: usize,
    pub schedule: Vec<f64>,
    pub window: usize,
    pub sampler: SamplerKind,
    pub strategy: StrategyKind,
    pub world: WorldConfig,
    pub drift: DriftConfig,
    pub correction: CorrectionSection,
    pub tts: TtsConfig,
    pub tto: TtoConfig,
    pub semantic: SemanticConfig,
    pub metrics: MetricsConfig,
    pub report: ReportConfig,
    /// Dotted key to the list of values it takes in a sweep.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            n_chunks: 30,
            n_seeds: 100,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            window: 3,
            sampler: SamplerKind::Stochastic,
            strategy: StrategyKind::Correction,
            world: WorldConfig::default(),
            drift: DriftConfig::default(),
            correction: CorrectionSection::default(),
            tts: TtsConfig::default(),
            tto: TtoConfig::default(),
            semantic: SemanticConfig::default(),
            metrics: MetricsConfig::default(),
            report: ReportConfig::default(),
            sweep: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub frame_dim: usize,
    pub frames_per_chunk: usize,
    pub persistence: f64,
    pub rotation: f64,
    pub process_var: f64,
    /// Variance of chunk 0 around the stationary mean.
    pub init_var: f64,
    pub mean_scale: f64,
    /// Replaces the built-in mean pattern; `mean_scale` still applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_frame: Option<Vec<f64>>,
    pub mixture_components: usize,
    /// Components sit evenly on `[-spread, spread]` along the all-ones direction.
    pub mixture_spread: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            frames_per_chunk: 4,
            persistence: 0.99,
            rotation: 0.3,
            process_var: 0.02,
            init_var: 0.02,
            mean_scale: 0.3,
            mean_frame: None,
            mixture_components: 1,
            mixture_spread: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub gain: f64,
    /// Added to every coordinate of the prediction.
    pub bias: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self { gain: 1.0, bias: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionSection {
    pub mode: CorrectionMode,
    pub levels: Vec<f64>,
    pub sink_lambda: f64,
}

impl Default for CorrectionSection {
    fn default() -> Self {
        Self {
            mode: CorrectionMode::Baseline,
            levels: Vec::new(),
            sink_lambda: DEFAULT_SINK_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtsConfig {
    pub mode: TtsMode,
    pub n: usize,
    pub reward: RewardKind,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            mode: TtsMode::Bon,
            n: 5,
            reward: RewardKind::DriftPenalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtoConfig {
    pub reward: RewardKind,
    pub rank: usize,
    pub steps: usize,
    pub step_size: f64,
    pub prox: f64,
    pub optimizer: Optimizer,
    pub batch: usize,
    pub init_scale: f64,
}

impl Default for TtoConfig {
    fn default() -> Self {
        let a = AdapterSpec::default();
        Self {
            reward: RewardKind::Reconstruction,
            rank: a.rank,
            steps: a.steps,
            step_size: a.step_size,
            prox: a.prox,
            optimizer: a.optimizer,
            batch: a.batch,
            init_scale: a.init_scale,
        }
    }
}

/// Encoder used by semantic rewards; independent of the metric encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    pub encoder: EncoderChoice,
    pub seed: u64,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderChoice::Nonlinear,
            seed: 99,
            hidden: 32,
            embed: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub encoder: EncoderChoice,
    pub encoder_seed: u64,
    pub encoder_hidden: usize,
    pub encoder_embed: usize,
    pub bins: usize,
    pub stride: usize,
    pub boundary_distance: DistanceKind,
    pub dynamic_distance: DistanceKind,
    pub density_eps: f64,
    pub channel_scale: f64,
    /// Summary fields aggregated and compared.
    pub fields: Vec<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let suite = MetricSuite::new(FrameEncoder::identity(1));
        Self {
            encoder: EncoderChoice::Nonlinear,
            encoder_seed: 7,
            encoder_hidden: 32,
            encoder_embed: 16,
            bins: suite.bins,
            stride: suite.stride,
            boundary_distance: suite.boundary_distance,
            dynamic_distance: suite.dynamic_distance,
            density_eps: suite.density_eps,
            channel_scale: suite.channel_map.scale,
            fields: SUMMARY_FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Output directory when neither `--out` nor the environment sets one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Paired reference run: `"self"` reruns this scenario with plain
    /// sampling; anything else is a path to another scenario file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Significance level separating "tie" from a direction.
    pub alpha: f64,
    /// Also write every rollout as JSON lines.
    pub rollouts: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            out: None,
            baseline: None,
            alpha: 0.05,
            rollouts: false,
        }
    }
}

/// Everything a run needs, built from a validated scenario.
#[derive(Debug, Clone)]
pub struct Plan {
    pub world: WorldSpec,
    pub denoiser: Denoiser,
    pub rollout: RolloutConfig,
    pub suite: MetricSuite,
    pub tto: Option<(AdapterSpec, RewardSpec)>,
    pub fields: Vec<String>,
}

fn semantic_err(key: &str, message: impl std::fmt::Display) -> LabError {
    LabError::Semantic { key: key.into(), message: message.to_string() }
}

fn keyed<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| semantic_err(key, e))
}

fn encoder(choice: EncoderChoice, dim: usize, hidden: usize, embed: usize, seed: u64, key: &str) -> Result<FrameEncoder> {
    match choice {
        EncoderChoice::Identity => Ok(FrameEncoder::identity(dim)),
        EncoderChoice::Nonlinear => {
            if hidden == 0 || embed == 0 {
                return Err(semantic_err(key, "encoder widths must be positive"));
            }
            Ok(FrameEncoder::nonlinear(dim, hidden, embed, seed))
        }
    }
}

impl Scenario {
    pub fn world_spec(&self) -> Result<WorldSpec> {
        let w = &self.world;
        if w.frame_dim == 0 {
            return Err(semantic_err("world.frame_dim", "must be positive"));
        }
        if w.frames_per_chunk == 0 {
            return Err(semantic_err("world.frames_per_chunk", "must be positive"));
        }
        if !(w.persistence.abs() < 1.0) {
            return Err(semantic_err("world.persistence", "must lie in (-1, 1)"));
        }
        for (key, v) in [("world.process_var", w.process_var), ("world.init_var", w.init_var)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(semantic_err(key, "must be a nonnegative finite number"));
            }
        }
        let pattern = match &w.mean_frame {
            Some(m) if m.len() != w.frame_dim => {
                return Err(semantic_err(
                    "world.mean_frame",
                    format!("has {} entries, frame_dim is {}", m.len(), w.frame_dim),
                ))
            }
            Some(m) => m.clone(),
            None => (0..w.frame_dim).map(|i| MEAN_PATTERN[i % MEAN_PATTERN.len()]).collect(),
        };
        let dim = w.frame_dim;
        let dynamics = FrameDynamics {
            frame_dim: dim,
            frames_per_chunk: w.frames_per_chunk,
            persistence: w.persistence,
            rotation: w.rotation,
            mean_frame: DVector::from_iterator(dim, pattern.into_iter().map(|m| m * w.mean_scale)),
            process_var: DVector::from_element(dim, w.process_var),
            init_var: DVector::from_element(dim, w.init_var),
        };
        let mut world = keyed("world", WorldSpec::from_dynamics(&dynamics))?;
        match w.mixture_components {
            0 => return Err(semantic_err("world.mixture_components", "must be at least 1")),
            1 => {}
            k => {
                let n = world.chunk_dim();
                let unit = 1.0 / (n as f64).sqrt();
                let offsets = (0..k)
                    .map(|i| {
                        let c = -1.0 + 2.0 * i as f64 / (k - 1) as f64;
                        DVector::from_element(n, w.mixture_spread * c * unit)
                    })
                    .collect();
                world.mixture = Some(MixtureSpec { offsets, weights: vec![1.0 / k as f64; k] });
                keyed("world", world.validate())?;
            }
        }
        Ok(world)
    }

    pub fn denoiser(&self, world: &WorldSpec) -> Result<Denoiser> {
        if !self.drift.gain.is_finite() {
            return Err(semantic_err("drift.gain", "must be finite"));
        }
        if !self.drift.bias.is_finite() {
            return Err(semantic_err("drift.bias", "must be finite"));
        }
        let bias = DVector::from_element(world.chunk_dim(), self.drift.bias);
        Ok(Denoiser::biased(Denoiser::bayes_for(world), self.drift.gain, bias))
    }

    pub fn semantic_encoder(&self) -> Result<FrameEncoder> {
        let s = &self.semantic;
        encoder(s.encoder, self.world.frame_dim, s.hidden, s.embed, s.seed, "semantic")
    }

    fn reward(&self, kind: RewardKind) -> Result<RewardSpec> {
        Ok(match kind {
            RewardKind::Reconstruction => RewardSpec::reconstruction(),
            RewardKind::DriftPenalty => RewardSpec::drift_penalty(),
            RewardKind::Semantic => RewardSpec::semantic(self.semantic_encoder()?),
        })
    }

    pub fn adapter_spec(&self) -> Result<AdapterSpec> {
        let t = &self.tto;
        let spec = AdapterSpec {
            rank: t.rank,
            optimizer: t.optimizer,
            batch: t.batch,
            step_size: t.step_size,
            steps: t.steps,
            prox: t.prox,
            init_scale: t.init_scale,
        };
        if t.rank == 0 {
            return Err(semantic_err("tto.rank", "must be at least 1"));
        }
        if t.batch == 0 {
            return Err(semantic_err("tto.batch", "must be at least 1"));
        }
        if !(t.step_size > 0.0) || !t.step_size.is_finite() {
            return Err(semantic_err("tto.step_size", "must be positive"));
        }
        if !(t.prox >= 0.0) || !t.prox.is_finite() {
            return Err(semantic_err("tto.prox", "must be nonnegative"));
        }
        keyed("tto", spec.validate())?;
        Ok(spec)
    }

    fn correction(&self) -> Result<CorrectionConfig> {
        let c = &self.correction;
        let levels = c
            .levels
            .iter()
            .map(|&t| NoiseLevel::new(t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| semantic_err("correction.levels", e))?;
        if !(0.0..=1.0).contains(&c.sink_lambda) {
            return Err(semantic_err("correction.sink_lambda", "must lie in [0, 1]"));
        }
        Ok(CorrectionConfig { mode: c.mode, levels, sink_lambda: c.sink_lambda })
    }

    pub fn metric_suite(&self) -> Result<MetricSuite> {
        let m = &self.metrics;
        let enc = encoder(
            m.encoder,
            self.world.frame_dim,
            m.encoder_hidden,
            m.encoder_embed,
            m.encoder_seed,
            "metrics.encoder",
        )?;
        if m.bins == 0 {
            return Err(semantic_err("metrics.bins", "must be at least 1"));
        }
        if m.stride == 0 {
            return Err(semantic_err("metrics.stride", "must be at least 1"));
        }
        if !(m.density_eps > 0.0) {
            return Err(semantic_err("metrics.density_eps", "must be positive"));
        }
        if !(m.channel_scale > 0.0) || !m.channel_scale.is_finite() {
            return Err(semantic_err("metrics.channel_scale", "must be positive"));
        }
        Ok(MetricSuite {
            encoder: enc,
            bins: m.bins,
            stride: m.stride,
            boundary_distance: m.boundary_distance,
            dynamic_distance: m.dynamic_distance,
            density_eps: m.density_eps,
            channel_map: ChannelMap { scale: m.channel_scale },
        })
    }

    /// Validates every section and builds the runtime objects.
    pub fn plan(&self) -> Result<Plan> {
        if self.n_seeds == 0 {
            return Err(semantic_err("n_seeds", "must be at least 1"));
        }
        if self.n_chunks == 0 {
            return Err(semantic_err("n_chunks", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(semantic_err("window", "must be at least 1"));
        }
        if !(self.report.alpha > 0.0 && self.report.alpha < 1.0) {
            return Err(semantic_err("report.alpha", "must lie in (0, 1)"));
        }
        let schedule = keyed("schedule", make_rf_schedule(&self.schedule))?;
        let world = self.world_spec()?;
        let denoiser = self.denoiser(&world)?;
        let suite = self.metric_suite()?;
        for f in &self.metrics.fields {
            if !SUMMARY_FIELDS.contains(&f.as_str()) {
                return Err(semantic_err(
                    "metrics.fields",
                    format!("unknown field `{f}`, expected one of {}", SUMMARY_FIELDS.join(", ")),
                ));
            }
        }
        let correction = self.correction()?;
        let mut tto = None;
        let strategy = match self.strategy {
            StrategyKind::Correction => {
                keyed("correction.levels", correction.validate(&schedule))?;
                Strategy::Correction(correction)
            }
            StrategyKind::Tts => {
                if self.tts.n == 0 {
                    return Err(semantic_err("tts.n", "must be at least 1"));
                }
                let reward = self.reward(self.tts.reward)?;
                match self.tts.mode {
                    TtsMode::Bon => Strategy::BestOfN { n: self.tts.n, reward },
                    TtsMode::Sop => Strategy::SearchOverPath { n: self.tts.n, reward },
                }
            }
            StrategyKind::Tto => {
                tto = Some((self.adapter_spec()?, self.reward(self.tto.reward)?));
                Strategy::baseline()
            }
        };
        let rollout = RolloutConfig {
            n_chunks: self.n_chunks,
            schedule,
            window: self.window,
            sampler: self.sampler,
            strategy,
        };
        keyed("sampler", rollout.validate())?;
        Ok(Plan {
            world,
            denoiser,
            rollout,
            suite,
            tto,
            fields: self.metrics.fields.clone(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(format!("cannot serialize scenario: {e}")))
    }

    /// The same scenario with plain sampling in place of its strategy.
    pub fn as_baseline(&self) -> Scenario {
        Scenario {
            name: format!("{}-baseline", self.name),
            strategy: StrategyKind::Correction,
            correction: CorrectionSection::default(),
            report: ReportConfig { baseline: None, ..self.report.clone() },
            sweep: BTreeMap::new(),
            ..self.clone()
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses without semantic validation.
pub fn parse_unchecked(text: &str) -> Result<Scenario> {
    toml::from_str(text).map_err(|e| LabError::Syntax {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })
}

/// Parses and fully validates a scenario file.
pub fn parse_config(text: &str) -> Result<Scenario> {
    let s = parse_unchecked(text)?;
    s.plan()?;
    Ok(s)
}
