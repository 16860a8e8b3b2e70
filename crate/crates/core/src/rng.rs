//! Seeded, counter-based random numbers.
//!
//! The generator is SplitMix64 used in counter mode: draw `i` (zero based) of a
//! stream with seed `s` is `mix(s + (i + 1) * 0x9E37_79B9_7F4A_7C15)` where `mix`
//! is the SplitMix64 finalizer. Everything is wrapping 64-bit integer arithmetic,
//! so the stream for a given seed is identical on every platform.
//!
//! Derived draws:
//! - `next_f64` takes the top 53 bits: `(u >> 11) * 2^-53`, in `[0, 1)`.
//! - `below(n)` uses rejection sampling on the full 64-bit draw.
//! - `gaussian` is Box-Muller on two uniforms (the sine half is discarded, so
//!   every normal consumes exactly two draws).

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// A stream positioned after `position` draws of seed `seed`.
    pub fn resume(seed: u64, position: u64) -> Self {
        Rng { seed, counter: position }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, label: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(label.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
