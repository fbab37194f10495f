//! Counter-based pseudorandom generator with independent substreams.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so trajectory
//! `tau` of a dataset can be produced in isolation and parallel generation is
//! bitwise identical to sequential generation. The output sequence is part of
//! the reproducibility contract; [`RNG_VERSION`] must be bumped if it changes.

/// Identifier of the generator algorithm and its substream derivation.
pub const RNG_VERSION: &str = "splitmix64-ctr/1";

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A splitmix64 finalizer applied to a per-stream key plus a counter.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Substream `stream` of the generator seeded with `seed`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = mix(mix(seed.wrapping_mul(GAMMA) ^ 0x5851_f42d_4c95_7f2d) ^ mix(stream));
        CounterRng { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)));
        self.counter += 1;
        out
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Sample an index from an (unnormalized is not allowed) probability row.
    ///
    /// Walks the cumulative sum in index order; the accumulation order is
    /// fixed so results are platform independent.
    pub fn sample_index(&mut self, probs: &[f64]) -> usize {
        let u = self.next_f64();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding can leave acc marginally below 1; fall back to the last
        // index with positive mass.
        probs
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(probs.len() - 1)
    }
}
