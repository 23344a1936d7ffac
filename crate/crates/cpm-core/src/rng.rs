//! Counter-based splittable pseudo-randomness.
//!
//! Every random choice in the pipeline is a pure function of
//! `(seed, stream, counter)` pushed through a 64-bit finalizer. Nothing is
//! drawn from a shared sequential state, so independent choices stay
//! independent: regenerating an example with one concept forced re-uses
//! exactly the same draws for everything else, and inserting a new draw site
//! never shifts existing ones. The mix is the SplitMix64 finalizer over a
//! weighed combination of the three keys, which is easy to reproduce
//! bit-for-bit in any language with 64-bit wrapping arithmetic.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

/// Mixes `(seed, stream, counter)` into a uniform 64-bit word.
#[inline]
pub fn mix(seed: u64, stream: u64, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(GOLDEN))
        .wrapping_add(counter.wrapping_mul(MIX_A));
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

/// Uniform double in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform index in `[0, bound)` via 128-bit multiply-shift. `bound` must be
/// nonzero.
#[inline]
pub fn bounded(word: u64, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((word as u128 * bound as u128) >> 64) as usize
}

/// A keyed stream that hands out consecutive counters. Cloning or recreating
/// it with the same `(seed, stream)` replays the same sequence.
#[derive(Debug, Clone)]
pub struct StreamRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let word = mix(self.seed, self.stream, self.counter);
        self.counter += 1;
        word
    }

    /// Uniform double in `[0, 1)`.
    #[inline]
    pub fn unit(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform index in `[0, bound)`.
    #[inline]
    pub fn index(&mut self, bound: usize) -> usize {
        bounded(self.next_u64(), bound)
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn coin(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Samples an index from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0, "categorical weights must sum to a positive value");
        let mut mark = self.unit() * total;
        for (i, w) in weights.iter().enumerate() {
            mark -= w;
            if mark < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_pure_and_key_sensitive() {
        assert_eq!(mix(7, 3, 11), mix(7, 3, 11));
        let base = mix(7, 3, 11);
        assert_ne!(base, mix(8, 3, 11));
        assert_ne!(base, mix(7, 4, 11));
        assert_ne!(base, mix(7, 3, 12));
    }

    #[test]
    fn unit_stays_in_half_open_interval() {
        let mut rng = StreamRng::new(42, 0);
        for _ in 0..10_000 {
            let x = rng.unit();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn bounded_covers_small_ranges_roughly_uniformly() {
        let mut rng = StreamRng::new(9, 1);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[rng.index(5)] += 1;
        }
        for &c in &counts {
            // 10k expected per bucket; allow 5% slack.
            assert!((9_500..=10_500).contains(&c), "bucket count {c} outside tolerance");
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = StreamRng::new(123, 2);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "variance {var}");
    }

    #[test]
    fn categorical_respects_weights() {
        let mut rng = StreamRng::new(5, 3);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[rng.categorical(&[1.0, 2.0, 1.0])] += 1;
        }
        assert!((counts[1] as f64 / 30_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn streams_replay_identically() {
        let a: Vec<u64> = {
            let mut rng = StreamRng::new(77, 9);
            (0..32).map(|_| rng.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut rng = StreamRng::new(77, 9);
            (0..32).map(|_| rng.next_u64()).collect()
        };
        assert_eq!(a, b);
    }
}
