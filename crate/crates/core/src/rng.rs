//! Counter-based random number generation.
//!
//! Every random quantity in this crate is a pure function of
//! `(seed, stream, index)`: no generator state is carried between draws, so
//! results are identical no matter how work is split across threads or in
//! which order sites/steps are evaluated.
//!
//! Derivation (normative for reproducibility): a stream key is
//! `mix64(seed ^ mix64(stream ^ STREAM_SALT))`, and the value at counter `i`
//! is `mix64(key + (i+1)·GOLDEN)` where `mix64` is the SplitMix64 finalizer.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xB524_6FAC_9F1E_33D7;

/// SplitMix64 finalizer: a full-avalanche 64-bit mix.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Purpose tags for the independent random streams of one experiment seed.
/// Replica-local streams combine a purpose with a replica number via
/// [`substream`].
pub mod stream {
    pub const SITES: u64 = 0x01;
    pub const GFF_NOISE: u64 = 0x02;
    pub const ITL_START: u64 = 0x03;
    pub const ITL_STEPS: u64 = 0x04;
    pub const WALK_STEPS: u64 = 0x05;
    pub const ISO_CANDIDATES: u64 = 0x06;
    pub const SUBSETS: u64 = 0x07;
    pub const REPLICA: u64 = 0x08;
}

/// Derives a per-replica sub-seed so that replicas are independent streams
/// of the one experiment seed.
#[inline]
pub fn substream(seed: u64, purpose: u64, replica: u64) -> u64 {
    mix64(seed ^ mix64(purpose.wrapping_mul(GOLDEN) ^ replica.wrapping_mul(STREAM_SALT)))
}

/// A keyed counter generator. `Copy`-cheap; draws are addressed by index.
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: mix64(seed ^ mix64(stream ^ STREAM_SALT)),
        }
    }

    #[inline]
    pub fn u64_at(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    pub fn uniform_open_at(&self, index: u64) -> f64 {
        ((self.u64_at(index) >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Unbiased integer in [0, bound) by the widening-multiply reduction.
    #[inline]
    pub fn below_at(&self, index: u64, bound: u64) -> u64 {
        ((self.u64_at(index) as u128 * bound as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller; consumes counter slots 2i and 2i+1.
    #[inline]
    pub fn normal_at(&self, i: u64) -> f64 {
        let u1 = self.uniform_open_at(2 * i);
        let u2 = self.uniform_at(2 * i + 1);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
