//! Scalar abstraction and deterministic random streams.
//!
//! All numerical code in this crate is generic over [`Real`], implemented for
//! `f32` and `f64`. Reference results and file formats are `f64`; `f32` exists
//! as a faster training precision. Randomness comes from a counter-based
//! generator so that any draw is addressable by `(seed, stream, index)` and
//! results never depend on evaluation order.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant to the working scalar type.
#[inline]
pub fn real<R: Real>(v: f64) -> R {
    R::from_f64(v).expect("f64 constant converts to scalar")
}

/// Convert the working scalar to `f64` (exact for f32/f64).
#[inline]
pub fn to_f64<R: Real>(v: R) -> f64 {
    v.to_f64().expect("scalar converts to f64")
}

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

// ── Counter-based random streams ─────────────────────────────────────────────

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a high-quality 64-bit mixing function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a (seed, a) pair into an independent 64-bit key.
#[inline]
pub fn key2(seed: u64, a: u64) -> u64 {
    mix64(mix64(seed) ^ a)
}

/// Hash a (seed, a, b) triple into an independent 64-bit key.
#[inline]
pub fn key3(seed: u64, a: u64, b: u64) -> u64 {
    mix64(key2(seed, a) ^ b)
}

/// Hash a (seed, a, b, c) quadruple into an independent 64-bit key.
#[inline]
pub fn key4(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    mix64(key3(seed, a, b) ^ c)
}

/// Map a 64-bit word to a uniform double in `[0, 1)`.
#[inline]
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential deterministic RNG over a SplitMix64 stream.
///
/// Two instances built from the same key emit identical sequences regardless
/// of platform or thread schedule.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
    cached_normal: Option<f64>,
}

impl Stream {
    pub fn new(key: u64) -> Self {
        Stream {
            state: mix64(key),
            cached_normal: None,
        }
    }

    /// Sub-stream derived from a seed and a stream label.
    pub fn keyed(seed: u64, label: u64) -> Self {
        Stream::new(key2(seed, label))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift avoids modulo bias well below 2^53 buckets.
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller, one cached mate per pair.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // Guard against ln(0): shift u1 into (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.cached_normal = Some(r * s);
        r * c
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Uniform phase in `[0, 2π)` addressed by (seed, sample, path).
///
/// This is the random ingredient of the Monte Carlo estimator: phases are
/// counter-addressed so realizations can be evaluated in any order (or in
/// parallel) without changing a single draw.
#[inline]
pub fn phase_at(seed: u64, sample: u64, path: u64) -> f64 {
    std::f64::consts::TAU * unit_f64(key3(seed, sample, path))
}
