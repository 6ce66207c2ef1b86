//! Counter-based dither generation.
//!
//! A dither sample is addressed by `(seed, round, index)` and computed by
//! two applications of the SplitMix64 finalizer, so a worker and the server
//! holding the same seed reproduce bit-identical dither without sharing any
//! generator state. Moving to the next training round is a counter increment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Golden-ratio increment of SplitMix64, used as the per-round stride.
pub const ROUND_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
/// First SplitMix64 multiplier, reused as the per-element stride.
pub const INDEX_STRIDE: u64 = 0xBF58_476D_1CE4_E5B9;

const UNIT_SCALE: f64 = 1.0 / (1u64 << 53) as f64;

/// The SplitMix64 output finalizer. A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Top 53 bits of `x` as a double in `[0, 1)`.
#[inline]
pub fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * UNIT_SCALE
}

/// Sequential SplitMix64 generator. Used for seeding, not for dither.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(ROUND_STRIDE);
        mix64(self.state)
    }
}

/// The stride constants that turn coordinates into a hash input.
///
/// Only [`DitherGenerator::STANDARD`] is used by the protocol; other values
/// exist so the verification suite can run a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DitherGenerator {
    pub round_stride: u64,
    pub index_stride: u64,
}

impl DitherGenerator {
    pub const STANDARD: Self = Self {
        round_stride: ROUND_STRIDE,
        index_stride: INDEX_STRIDE,
    };

    #[inline]
    pub fn raw(&self, coords: DitherCoordinates, index: u64) -> u64 {
        let round_key = mix64(coords.seed.wrapping_add(self.round_stride.wrapping_mul(coords.round)));
        mix64(round_key.wrapping_add(self.index_stride.wrapping_mul(index)))
    }

    #[inline]
    pub fn unit(&self, coords: DitherCoordinates, index: u64) -> f64 {
        to_unit(self.raw(coords, index))
    }

    /// Dither sample in `[-delta/2, delta/2)`.
    #[inline]
    pub fn dither(&self, coords: DitherCoordinates, index: u64, delta: f64) -> f64 {
        (self.unit(coords, index) - 0.5) * delta
    }
}

impl Default for DitherGenerator {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Seed and round of one worker's dither stream. The element index is
/// supplied per sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DitherCoordinates {
    pub seed: u64,
    pub round: u64,
}

impl DitherCoordinates {
    pub const fn new(seed: u64, round: u64) -> Self {
        Self { seed, round }
    }

    /// Coordinates of worker `p` at round 0: seed `master_seed + p`.
    pub const fn for_worker(master_seed: u64, p: usize) -> Self {
        Self {
            seed: master_seed.wrapping_add(p as u64),
            round: 0,
        }
    }

    /// Independent stream for the `lane`-th summand of a multi-uniform dither.
    /// Lane 0 is the stream itself.
    pub fn lane(self, lane: u32) -> Self {
        if lane == 0 {
            return self;
        }
        Self {
            seed: mix64(self.seed ^ INDEX_STRIDE.wrapping_mul(lane as u64)),
            round: self.round,
        }
    }

    #[inline]
    pub fn unit_at(self, index: u64) -> f64 {
        DitherGenerator::STANDARD.unit(self, index)
    }

    #[inline]
    pub fn dither_at(self, index: u64, delta: f64) -> f64 {
        dither_at(self, index, delta)
    }

    /// The first `n` dither samples of this round, converted to `T`.
    pub fn stream<T: Scalar>(self, n: usize, delta: f64) -> Vec<T> {
        (0..n as u64)
            .map(|i| T::from_f64_lossy(dither_at(self, i, delta)))
            .collect()
    }

    /// Next round's coordinates. The seed never changes.
    pub fn advance_round(self) -> Result<Self> {
        let round = self
            .round
            .checked_add(1)
            .ok_or_else(|| Error::Protocol(format!("round counter overflow for seed {}", self.seed)))?;
        Ok(Self { round, ..self })
    }
}

/// Dither sample `u` in `[-delta/2, delta/2)` for the given coordinates.
#[inline]
pub fn dither_at(coords: DitherCoordinates, index: u64, delta: f64) -> f64 {
    DitherGenerator::STANDARD.dither(coords, index, delta)
}

/// Advance a worker or server mirror to the next round.
pub fn advance_round(coords: DitherCoordinates) -> Result<DitherCoordinates> {
    coords.advance_round()
}
