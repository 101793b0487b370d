//! Counter-based deterministic Gaussian noise.
//!
//! Every stream is a pure function of a 64-bit seed and an element index:
//! a SplitMix-style finalizer mixes `seed xor f(counter)` into 64 random
//! bits, the top 53 bits become a uniform, and consecutive uniform pairs
//! feed Box-Muller. Both Box-Muller outputs are consumed, in order, so a
//! stream can be dropped and reconstructed from its seed at any time and
//! replay exactly the same values. Transcendentals come from `libm` so the
//! output does not depend on the platform's math library.

/// Golden-ratio increment used to spread counters across the mix input.
const PHI: u64 = 0x9E37_79B9_7F4A_7C15;

/// Secondary odd constant for domain-separated seed derivation.
const PHI2: u64 = 0xD1B5_4A32_D192_ED03;

/// Identifies one deterministic noise stream.
///
/// Seeds are plain numbers; equality of seeds is equality of streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseSeed(pub u64);

/// SplitMix64 finalizer: a bijective avalanche over 64 bits.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed, a domain tag, and an index.
///
/// Different domain tags give statistically independent seed families, so
/// perturbation noise, sampling, and data generation never share a stream.
#[inline]
pub fn derive_seed(base: NoiseSeed, domain: u64, index: u64) -> NoiseSeed {
    let a = mix64(base.0 ^ domain.wrapping_mul(PHI));
    NoiseSeed(mix64(a ^ index.wrapping_mul(PHI2)))
}

/// Raw 64 random bits for `slot` within the stream named by `seed`.
#[inline]
fn slot_bits(seed: NoiseSeed, slot: u64) -> u64 {
    mix64(seed.0 ^ slot.wrapping_add(1).wrapping_mul(PHI))
}

/// Uniform in `[0, 1)` with 53 bits of precision.
#[inline]
fn uniform53(seed: NoiseSeed, slot: u64) -> f64 {
    (slot_bits(seed, slot) >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform in `(0, 1]`, safe as a logarithm argument.
#[inline]
fn uniform53_open_zero(seed: NoiseSeed, slot: u64) -> f64 {
    ((slot_bits(seed, slot) >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Both Box-Muller outputs for pair `p` (elements `2p` and `2p + 1`).
#[inline]
fn gaussian_pair(seed: NoiseSeed, p: u64) -> (f64, f64) {
    let u1 = uniform53_open_zero(seed, 2 * p);
    let u2 = uniform53(seed, 2 * p + 1);
    let r = libm::sqrt(-2.0 * libm::log(u1));
    let theta = core::f64::consts::TAU * u2;
    (r * libm::cos(theta), r * libm::sin(theta))
}

/// Replayable stream of standard normal (and uniform) deviates.
///
/// The cursor counts elements from zero. Gaussian element `k` is a pure
/// function of `(seed, k)`: pair `k / 2` is derived from uniform slots
/// `2(k/2)` and `2(k/2) + 1`, and `k`'s parity selects the cosine or sine
/// output. `skip` is therefore O(1). Uniform draws consume one slot each;
/// a given stream should serve either Gaussian or uniform draws, not both.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: NoiseSeed,
    cursor: u64,
    /// Cached sine-half of the most recently computed pair.
    cached: Option<(u64, f64)>,
}

impl NoiseStream {
    pub fn new(seed: NoiseSeed) -> Self {
        NoiseStream { seed, cursor: 0, cached: None }
    }

    pub fn seed(&self) -> NoiseSeed {
        self.seed
    }

    /// Index of the next element to be produced.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Advances the cursor by `n` elements without computing them.
    pub fn skip(&mut self, n: u64) {
        self.cursor += n;
    }

    /// Next standard normal deviate. Always finite.
    pub fn next_gaussian(&mut self) -> f64 {
        let k = self.cursor;
        self.cursor += 1;
        let pair = k / 2;
        if k % 2 == 1 {
            if let Some((p, sine)) = self.cached.take() {
                if p == pair {
                    return sine;
                }
            }
            gaussian_pair(self.seed, pair).1
        } else {
            let (cos_half, sin_half) = gaussian_pair(self.seed, pair);
            self.cached = Some((pair, sin_half));
            cos_half
        }
    }

    /// Next uniform deviate in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        let u = uniform53(self.seed, self.cursor);
        self.cursor += 1;
        u
    }

    /// Next integer uniform on `0..bound` (`bound` must be nonzero).
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let idx = (self.next_uniform() * bound as f64) as usize;
        idx.min(bound - 1)
    }
}
