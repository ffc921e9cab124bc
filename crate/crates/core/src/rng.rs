//! Seeded substreams.
//!
//! Every random draw in a rollout comes from a ChaCha8 stream keyed by
//! `(run seed, chunk index, purpose, index)`. Draw order inside a stream is
//! part of the reproducibility contract: initial noise first, then one draw per
//! transition, in schedule order.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Latent;

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Initial noise and per-transition renoising.
    Path = 1,
    /// Second draw of each path-wise correction.
    Correction = 2,
    /// Extra search-over-path candidates.
    Search = 3,
    /// Ground-truth sampling.
    World = 4,
    /// Test-time optimization sampling.
    Adapt = 5,
    /// Adapter initialization.
    AdapterInit = 6,
    /// Oracle experiments.
    Oracle = 7,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive mix of several words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x243F_6A88_85A3_08D3, |acc, &w| splitmix(acc ^ splitmix(w)))
}

/// Seed of the `index`-th replicate of a run started from `base_seed`.
pub fn replicate_seed(base_seed: u64, index: u64) -> u64 {
    mix(&[base_seed, index])
}

/// A counted stream of standard-normal vectors.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    key: u64,
    drawn: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, chunk: u64, purpose: Purpose, index: u64) -> Self {
        let key = mix(&[seed, chunk, purpose as u64, index]);
        Self {
            rng: ChaCha8Rng::seed_from_u64(key),
            key,
            drawn: 0,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            key: seed,
            drawn: 0,
        }
    }

    /// Draws a standard-normal vector and returns it with its draw id.
    pub fn normal(&mut self, dim: usize) -> (Latent, DrawId) {
        let id = DrawId { stream: self.key, index: self.drawn };
        self.drawn += 1;
        let v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut self.rng));
        (v, id)
    }

    pub fn normal_vec(&mut self, dim: usize) -> Latent {
        self.normal(dim).0
    }

    pub fn scalar_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn drawn(&self) -> u64 {
        self.drawn
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Identifies one vector draw: the stream key and its position in the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct DrawId {
    pub stream: u64,
    pub index: u64,
}
