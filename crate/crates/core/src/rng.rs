//! Counter-based random streams.
//!
//! Every draw is a pure function of `(key, counter)`: the n-th output of a
//! stream is `mix(key + n * GOLDEN)`, the SplitMix64 output function applied
//! to a Weyl sequence. Streams for clients, rounds and purposes are derived
//! by hashing labels into the key, so results never depend on the order in
//! which parallel workers consume randomness.

use rand_core::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a derived stream is used for. Distinct purposes give independent
/// streams even under the same seed/client/round labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    AttackStart = 3,
    Augment = 4,
    Partition = 5,
    Subsample = 6,
    ClientSampling = 7,
    MixFat = 8,
    Blobs = 9,
    Evaluation = 10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// A stream positioned at an arbitrary counter; `at(k, c)` yields the
    /// same values as `new(k)` after `c` draws.
    pub fn at(key: u64, counter: u64) -> Self {
        Self { key, counter }
    }

    /// Independent child stream keyed by `(self.key, label)`. The parent's
    /// counter does not participate.
    pub fn derive(&self, label: u64) -> Self {
        let salt = mix64(label.wrapping_mul(GOLDEN) ^ 0xD1B5_4A32_D192_ED03);
        Self::new(mix64(self.key ^ salt.rotate_left(17)).wrapping_add(salt))
    }

    pub fn derive_all(&self, labels: &[u64]) -> Self {
        labels.iter().fold(*self, |s, &l| s.derive(l))
    }

    pub fn for_purpose(&self, purpose: Purpose) -> Self {
        self.derive(purpose as u64)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer in `[0, bound)`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        // Lemire's multiply-shift with rejection.
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly without replacement, in
    /// draw order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (RngStream::next_u64(self) >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        RngStream::next_u64(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = RngStream::next_u64(self).to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
