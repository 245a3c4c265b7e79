//! Seeded, splittable, counter-based random generator.
//!
//! Every run owns one root stream and derives named child streams from it, so
//! adding a consumer never shifts the draws of another and whole runs replay
//! bit-exactly. The generator is the SplitMix64 output function applied to
//! `key + counter * phi`, which makes any draw addressable by index.

use crate::scalar::Scalar;

const PHI: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream of pseudo-random draws.
#[derive(Clone, Debug)]
pub struct DeskRng {
    key: u64,
    counter: u64,
}

impl DeskRng {
    pub fn seed_from(seed: u64) -> Self {
        DeskRng { key: mix(seed ^ PHI), counter: 0 }
    }

    /// Independent child stream; children with distinct tags never collide
    /// with each other or with the parent.
    pub fn derive(&self, tag: u64) -> Self {
        DeskRng { key: mix(self.key ^ mix(tag.wrapping_mul(PHI) ^ 0x6c62_272e_07bb_0142)), counter: 0 }
    }

    /// Child stream tagged by a label (FNV-1a over the label bytes).
    pub fn derive_str(&self, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in label.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.derive(h)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(c.wrapping_mul(PHI)))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn next_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Multiply-shift; bias is < n / 2^64.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw (Box-Muller; consumes exactly two uniforms).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_gaussian<S: Scalar>(&mut self, out: &mut [S], std: f64) {
        for v in out.iter_mut() {
            *v = S::from_f64_lossy(self.next_gaussian() * std);
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}
