//! Temporal-consistency metrics over generated frame sequences.
//!
//! Perceptual networks are replaced by fixed stand-ins: a configurable frame
//! distance for the boundary and dynamics metrics, a squashing map from frame
//! coordinates to a bounded channel for the histogram metric, and a random
//! two-layer `tanh` feature map for the embedding metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::NoiseStream;
use crate::sampler::RolloutRecord;
use crate::Latent;

pub const DEFAULT_BINS: usize = 180;
pub const DEFAULT_STRIDE: usize = 12;
pub const DEFAULT_DENSITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
enum EncoderKind {
    Identity { dim: usize },
    Linear { weight: DMatrix<f64> },
    Nonlinear { w1: DMatrix<f64>, b1: DVector<f64>, w2: DMatrix<f64> },
}

/// Fixed frame embedding. Deterministic in its construction seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoder {
    kind: EncoderKind,
    scale: f64,
}

impl FrameEncoder {
    pub fn identity(dim: usize) -> Self {
        Self { kind: EncoderKind::Identity { dim }, scale: 1.0 }
    }

    /// `z = W2 tanh(W1 f + b1)` with Gaussian weights drawn from `seed`.
    pub fn nonlinear(input_dim: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = NoiseStream::from_seed(seed);
        let s1 = (1.0 / input_dim as f64).sqrt();
        let s2 = (1.0 / hidden_dim as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden_dim, input_dim, |_, _| s1 * rng.scalar_normal());
        let b1 = DVector::from_fn(hidden_dim, |_, _| 0.5 * rng.scalar_normal());
        let w2 = DMatrix::from_fn(embed_dim, hidden_dim, |_, _| s2 * rng.scalar_normal());
        Self {
            kind: EncoderKind::Nonlinear { w1, b1, w2 },
            scale: 1.0,
        }
    }

    /// Random linear projection `z = W f`.
    pub fn linear(input_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = NoiseStream::from_seed(seed);
        let s = (1.0 / input_dim as f64).sqrt();
        let weight = DMatrix::from_fn(embed_dim, input_dim, |_, _| s * rng.scalar_normal());
        Self { kind: EncoderKind::Linear { weight }, scale: 1.0 }
    }

    /// Same encoder with its output multiplied by `c`.
    pub fn scaled(mut self, c: f64) -> Self {
        self.scale *= c;
        self
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            EncoderKind::Identity { dim } => *dim,
            EncoderKind::Linear { weight } => weight.ncols(),
            EncoderKind::Nonlinear { w1, .. } => w1.ncols(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match &self.kind {
            EncoderKind::Identity { dim } => *dim,
            EncoderKind::Linear { weight } => weight.nrows(),
            EncoderKind::Nonlinear { w2, .. } => w2.nrows(),
        }
    }

    pub fn encode(&self, frame: &Latent) -> Latent {
        let z = match &self.kind {
            EncoderKind::Identity { .. } => frame.clone(),
            EncoderKind::Linear { weight } => weight * frame,
            EncoderKind::Nonlinear { w1, b1, w2 } => w2 * (w1 * frame + b1).map(f64::tanh),
        };
        if self.scale == 1.0 {
            z
        } else {
            z * self.scale
        }
    }

    /// Analytic Jacobian `dz/df`, `embed_dim x input_dim`.
    pub fn jacobian(&self, frame: &Latent) -> DMatrix<f64> {
        let j = match &self.kind {
            EncoderKind::Identity { dim } => DMatrix::identity(*dim, *dim),
            EncoderKind::Linear { weight } => weight.clone(),
            EncoderKind::Nonlinear { w1, b1, w2 } => {
                let slope = (w1 * frame + b1).map(|a| 1.0 - a.tanh().powi(2));
                let mut scaled = w1.clone();
                for (mut row, s) in scaled.row_iter_mut().zip(slope.iter()) {
                    row *= *s;
                }
                w2 * scaled
            }
        };
        if self.scale == 1.0 {
            j
        } else {
            j * self.scale
        }
    }
}

/// Frame-pair distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance<'a> {
    L2,
    /// `1 - cos` between raw frames.
    Cosine,
    /// L2 between encoder embeddings.
    Embedded(&'a FrameEncoder),
}

impl Distance<'_> {
    pub fn eval(&self, a: &Latent, b: &Latent) -> f64 {
        match self {
            Distance::L2 => (a - b).norm(),
            Distance::Cosine => {
                let denom = a.norm() * b.norm();
                if denom == 0.0 {
                    if a == b {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    1.0 - a.dot(b) / denom
                }
            }
            Distance::Embedded(enc) => (enc.encode(a) - enc.encode(b)).norm(),
        }
    }
}

/// Maps a frame coordinate into `[0, 1)` for histogramming.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    /// `u = (1 + tanh(v / scale)) / 2`.
    pub scale: f64,
}

impl Default for ChannelMap {
    fn default() -> Self {
        Self { scale: 2.0 }
    }
}

impl ChannelMap {
    pub fn apply(&self, v: f64) -> f64 {
        0.5 * (1.0 + (v / self.scale).tanh())
    }

    /// L1-normalized histogram of the mapped coordinates of one frame.
    pub fn histogram(&self, frame: &Latent, bins: usize) -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &v in frame.iter() {
            let b = ((self.apply(v) * bins as f64) as usize).min(bins - 1);
            h[b] += 1.0;
        }
        let n = frame.len() as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }
}

/// Mean distance over the `K - 1` chunk junctions `(f[t_k], f[t_k + 1])`.
pub fn boundary_discontinuity(frames: &[Latent], boundaries: &[usize], distance: Distance) -> Result<f64> {
    let pairs: Vec<usize> = boundaries.iter().copied().filter(|&t| t + 1 < frames.len()).collect();
    if boundaries.len() < 2 || pairs.len() + 1 < boundaries.len() {
        return Err(LabError::UndefinedMetric(
            "boundary discontinuity needs at least two chunks with successor frames".into(),
        ));
    }
    let total: f64 = pairs.iter().map(|&t| distance.eval(&frames[t], &frames[t + 1])).sum();
    Ok(total / pairs.len() as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// `(||h_first - h_last||_1, pearson(h_first, h_last))`.
pub fn histogram_shift(first: &Latent, last: &Latent, bins: usize, channel_map: &ChannelMap) -> Result<(f64, f64)> {
    if first.is_empty() || last.is_empty() {
        return Err(LabError::UndefinedMetric("histogram of an empty frame".into()));
    }
    if bins == 0 {
        return Err(LabError::UndefinedMetric("histogram needs at least one bin".into()));
    }
    let ha = channel_map.histogram(first, bins);
    let hb = channel_map.histogram(last, bins);
    Ok(histogram_pair(&ha, &hb))
}

pub(crate) fn histogram_pair(ha: &[f64], hb: &[f64]) -> (f64, f64) {
    let l1 = ha.iter().zip(hb).map(|(x, y)| (x - y).abs()).sum::<f64>().min(2.0);
    (l1, pearson(ha, hb))
}

/// Embedding drift: `d_t = 1 - z_t . z_1` with unit-normalized embeddings,
/// summarized by the sample standard deviation of `d` and `|d_T - d_1|`.
pub fn embedding_drift(frames: &[Latent], encoder: &FrameEncoder) -> Result<(f64, f64, Vec<f64>)> {
    let zs = frames.iter().map(|f| encoder.encode(f)).collect::<Vec<_>>();
    drift_from_embeddings(&zs)
}

pub fn drift_from_embeddings(embeddings: &[Latent]) -> Result<(f64, f64, Vec<f64>)> {
    if embeddings.len() < 2 {
        return Err(LabError::UndefinedMetric("embedding drift needs at least two frames".into()));
    }
    let mut unit = Vec::with_capacity(embeddings.len());
    for (i, z) in embeddings.iter().enumerate() {
        let n = z.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(LabError::DegenerateEmbedding { frame: i });
        }
        unit.push(z / n);
    }
    // For unit vectors 1 - a.b = |a - b|^2 / 2, which is exact for identical frames.
    let d: Vec<f64> = unit.iter().map(|z| 0.5 * (z - &unit[0]).norm_squared()).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let diff = (d[d.len() - 1] - d[0]).abs();
    Ok((std, diff, d))
}

/// `sum_i log max(sigma_i, eps)` over the singular values of the encoder Jacobian.
pub fn density_score(frame: &Latent, encoder: &FrameEncoder, eps_clamp: f64) -> Result<f64> {
    let j = encoder.jacobian(frame);
    if j.iter().any(|x| !x.is_finite()) {
        return Err(LabError::NonFinite("encoder Jacobian".into()));
    }
    let sv = j.singular_values();
    Ok(sv.iter().map(|s| s.max(eps_clamp).ln()).sum())
}

/// Mean distance between frames `stride` apart.
pub fn dynamic_degree(frames: &[Latent], stride: usize, distance: Distance) -> Result<f64> {
    if stride == 0 || frames.len() <= stride {
        return Err(LabError::UndefinedMetric(format!(
            "dynamic degree with stride {stride} needs more than {stride} frames, got {}",
            frames.len()
        )));
    }
    let count = frames.len() - stride;
    let total: f64 = (0..count).map(|t| distance.eval(&frames[t], &frames[t + stride])).sum();
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    L2,
    Cosine,
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderChoice {
    #[default]
    Nonlinear,
    Identity,
}

/// Metric settings shared by every rollout of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSuite {
    pub encoder: FrameEncoder,
    pub bins: usize,
    pub stride: usize,
    pub boundary_distance: DistanceKind,
    pub dynamic_distance: DistanceKind,
    pub density_eps: f64,
    pub channel_map: ChannelMap,
}

impl MetricSuite {
    pub fn new(encoder: FrameEncoder) -> Self {
        Self {
            encoder,
            bins: DEFAULT_BINS,
            stride: DEFAULT_STRIDE,
            boundary_distance: DistanceKind::L2,
            dynamic_distance: DistanceKind::L2,
            density_eps: DEFAULT_DENSITY_EPS,
            channel_map: ChannelMap::default(),
        }
    }

    fn distance(&self, kind: DistanceKind) -> Distance<'_> {
        match kind {
            DistanceKind::L2 => Distance::L2,
            DistanceKind::Cosine => Distance::Cosine,
            DistanceKind::Encoder => Distance::Embedded(&self.encoder),
        }
    }

    pub fn report(&self, record: &RolloutRecord) -> Result<DriftReport> {
        let frames = record.frames();
        let (std, diff, d_trace) = embedding_drift(&frames, &self.encoder)?;
        let boundary_mean = boundary_discontinuity(&frames, &record.boundaries, self.distance(self.boundary_distance))?;
        let (hist_l1, hist_corr) = histogram_shift(&frames[0], &frames[frames.len() - 1], self.bins, &self.channel_map)?;
        let dynamic = dynamic_degree(&frames, self.stride, self.distance(self.dynamic_distance))?;
        let density_trace = frames
            .iter()
            .map(|f| density_score(f, &self.encoder, self.density_eps))
            .collect::<Result<Vec<_>>>()?;
        Ok(DriftReport {
            d_trace,
            std,
            diff,
            boundary_mean,
            hist_l1,
            hist_corr,
            dynamic,
            density_trace,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub d_trace: Vec<f64>,
    pub std: f64,
    pub diff: f64,
    pub boundary_mean: f64,
    pub hist_l1: f64,
    pub hist_corr: f64,
    pub dynamic: f64,
    pub density_trace: Vec<f64>,
}

/// Scalar fields of a [`DriftReport`] in a fixed order.
pub const SUMMARY_FIELDS: [&str; 9] = [
    "drift_std",
    "drift_diff",
    "boundary",
    "hist_l1",
    "hist_corr",
    "dynamic",
    "density_first",
    "density_last",
    "density_mean",
];

impl DriftReport {
    pub fn summary(&self) -> [f64; 9] {
        let dens = &self.density_trace;
        [
            self.std,
            self.diff,
            self.boundary_mean,
            self.hist_l1,
            self.hist_corr,
            self.dynamic,
            dens[0],
            dens[dens.len() - 1],
            dens.iter().sum::<f64>() / dens.len() as f64,
        ]
    }

    pub fn field(&self, name: &str) -> Option<f64> {
        SUMMARY_FIELDS.iter().position(|f| *f == name).map(|i| self.summary()[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Latent {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn boundary_examples() {
        let constant = vec![v(&[1.0, 2.0]); 8];
        assert_eq!(boundary_discontinuity(&constant, &[1, 3, 5, 7], Distance::L2).unwrap(), 0.0);

        let frames = vec![v(&[0.0, 0.0]), v(&[0.0, 0.0]), v(&[3.0, 0.0]), v(&[3.0, 0.0])];
        assert_eq!(boundary_discontinuity(&frames, &[1, 3], Distance::L2).unwrap(), 3.0);

        assert!(boundary_discontinuity(&frames[..2], &[1], Distance::L2).is_err());
    }

    #[test]
    fn histogram_examples() {
        let cm = ChannelMap::default();
        let f = v(&[0.1, -0.3, 2.0, 0.7]);
        assert_eq!(histogram_shift(&f, &f, DEFAULT_BINS, &cm).unwrap(), (0.0, 1.0));

        let (l1, _) = histogram_shift(&v(&[-5.0, -4.0]), &v(&[5.0, 4.0]), DEFAULT_BINS, &cm).unwrap();
        assert_eq!(l1, 2.0);

        let (_, r) = histogram_pair(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(r, -1.0);

        assert!(histogram_shift(&v(&[]), &f, DEFAULT_BINS, &cm).is_err());
        assert_eq!(DEFAULT_BINS, 180);
    }

    #[test]
    fn embedding_drift_examples() {
        let enc = FrameEncoder::identity(2);
        let constant = vec![v(&[1.0, 1.0]); 5];
        let (std, diff, d) = embedding_drift(&constant, &enc).unwrap();
        assert_eq!((std, diff), (0.0, 0.0));
        assert_eq!(d[0], 0.0);

        // Embeddings at 0, 60 and 90 degrees from the first: d = (0, 1/2, 1),
        // mean 1/2, sample variance ((1/2)^2 + 0 + (1/2)^2) / 2 = 1/4.
        let s3 = 3f64.sqrt();
        let frames = vec![v(&[1.0, 0.0]), v(&[0.5, s3 / 2.0]), v(&[0.0, 1.0])];
        let (std, diff, d) = embedding_drift(&frames, &enc).unwrap();
        assert!((d[1] - 0.5).abs() < 1e-12);
        assert!((d[2] - 1.0).abs() < 1e-12);
        assert!((std - 0.5).abs() < 1e-12);
        assert!((diff - 1.0).abs() < 1e-12);

        assert!(matches!(
            embedding_drift(&[v(&[1.0, 0.0]), v(&[0.0, 0.0])], &enc),
            Err(LabError::DegenerateEmbedding { frame: 1 })
        ));
        assert!(embedding_drift(&frames[..1], &enc).is_err());
    }

    #[test]
    fn density_examples() {
        let id = FrameEncoder::identity(4);
        assert_eq!(density_score(&v(&[0.3, 1.0, -2.0, 5.0]), &id, 1e-6).unwrap(), 0.0);

        let enc = FrameEncoder::nonlinear(4, 16, 3, 5);
        let f = v(&[0.3, 1.0, -0.2, 0.5]);
        let base = density_score(&f, &enc, 1e-12).unwrap();
        let scaled = density_score(&f, &enc.clone().scaled(2.5), 1e-12).unwrap();
        assert!((scaled - base - 3.0 * 2.5f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn dynamic_examples() {
        let constant = vec![v(&[1.0]); 20];
        assert_eq!(dynamic_degree(&constant, DEFAULT_STRIDE, Distance::L2).unwrap(), 0.0);
        let line: Vec<Latent> = (0..30).map(|t| v(&[0.25 * t as f64, 0.0])).collect();
        assert!((dynamic_degree(&line, 12, Distance::L2).unwrap() - 12.0 * 0.25).abs() < 1e-12);
        assert!(dynamic_degree(&line[..12], 12, Distance::L2).is_err());
        assert_eq!(DEFAULT_STRIDE, 12);
    }

    #[test]
    fn encoder_is_deterministic() {
        let a = FrameEncoder::nonlinear(8, 32, 16, 3);
        let b = FrameEncoder::nonlinear(8, 32, 16, 3);
        let c = FrameEncoder::nonlinear(8, 32, 16, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn nonlinear_jacobian_matches_finite_differences() {
        let enc = FrameEncoder::nonlinear(8, 32, 16, 9);
        let f = DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin());
        let j = enc.jacobian(&f);
        let h = 1e-6;
        for k in 0..8 {
            let mut p = f.clone();
            p[k] += h;
            let mut m = f.clone();
            m[k] -= h;
            let col = (enc.encode(&p) - enc.encode(&m)) / (2.0 * h);
            assert!((col - j.column(k)).amax() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn histogram_bounds(a in prop::collection::vec(-10.0f64..10.0, 1..16), b in prop::collection::vec(-10.0f64..10.0, 1..16), bins in 1usize..200) {
            let (l1, r) = histogram_shift(&v(&a), &v(&b), bins, &ChannelMap::default()).unwrap();
            prop_assert!((0.0..=2.0).contains(&l1));
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn drift_is_scale_invariant(c in 0.1f64..10.0, seed in 0u64..50) {
            let enc = FrameEncoder::nonlinear(4, 8, 5, seed);
            let frames: Vec<Latent> = (0..6).map(|t| DVector::from_fn(4, |i, _| ((t * 4 + i) as f64).cos())).collect();
            let (s1, d1, t1) = embedding_drift(&frames, &enc).unwrap();
            let (s2, d2, t2) = embedding_drift(&frames, &enc.clone().scaled(c)).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12 && (d1 - d2).abs() < 1e-12);
            for (x, y) in t1.iter().zip(&t2) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn boundary_is_rotation_invariant(angle in 0.0f64..6.3, xs in prop::collection::vec(-3.0f64..3.0, 12)) {
            let (s, c) = angle.sin_cos();
            let rot = nalgebra::DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            let frames: Vec<Latent> = xs.chunks(2).map(v).collect();
            let rotated: Vec<Latent> = frames.iter().map(|f| &rot * f).collect();
            let b = [1, 3, 5];
            let a1 = boundary_discontinuity(&frames, &b, Distance::L2).unwrap();
            let a2 = boundary_discontinuity(&rotated, &b, Distance::L2).unwrap();
            prop_assert!((a1 - a2).abs() < 1e-10);
        }

        #[test]
        fn identity_density_is_zero(xs in prop::collection::vec(-50.0f64..50.0, 5)) {
            prop_assert_eq!(density_score(&v(&xs), &FrameEncoder::identity(5), 1e-6).unwrap(), 0.0);
        }
    }
}
