//! Counter-based deterministic random numbers.
//!
//! Every random decision in the toy lab is a pure function of
//! `(seed, stream, counter)`, so corpora, initializations, and shuffling
//! schedules reproduce bit-for-bit regardless of thread count or platform.
//! The generator is a Weyl sequence through the splitmix64 finalizer.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Distinct random streams keyed by what the numbers are for.
///
/// A `(purpose, ordinal, lane)` triple maps to one stream, so parallel
/// per-period work never shares or reorders draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    BaseLogits,
    DriftLogits,
    SeasonPhase,
    TaskLogits,
    Sample,
    Init,
    Shuffle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::BaseLogits => 1,
            Purpose::DriftLogits => 2,
            Purpose::SeasonPhase => 3,
            Purpose::TaskLogits => 4,
            Purpose::Sample => 5,
            Purpose::Init => 6,
            Purpose::Shuffle => 7,
        }
    }
}

/// Derive a stream id for [`CounterRng::new`] from a purpose key.
pub fn stream(purpose: Purpose, ordinal: i64, lane: u64) -> u64 {
    mix64(purpose.tag().wrapping_mul(GOLDEN) ^ (ordinal as u64).rotate_left(17) ^ mix64(lane))
}

/// Deterministic counter-based generator.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    cached_normal: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: mix64(mix64(seed ^ GOLDEN) ^ stream),
            counter: 0,
            cached_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller; draws are paired and cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] to keep the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
