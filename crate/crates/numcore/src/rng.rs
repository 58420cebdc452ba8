use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::NumError;
use crate::tensor::{Real, Tensor};

/// Identifier of the generator backing [`RngStream`]. Recorded in manifests
/// so result files state exactly how their randomness was produced.
pub const RNG_ALGORITHM: &str = "chacha8/splitmix64-seed";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Used for seed expansion and child-seed derivation;
/// the exact constants are part of the reproducibility contract.
fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child-seed derivation: `hash(parent_seed, child_index)`.
///
/// Never share one stream across concurrent jobs; fork one child stream per
/// job instead.
pub fn fork_seed(parent_seed: u64, child_index: u64) -> u64 {
    splitmix64_mix(parent_seed.wrapping_add(GOLDEN_GAMMA.wrapping_mul(child_index.wrapping_add(1))))
}

/// Explicit seeded random stream.
///
/// The generator is ChaCha8 keyed by expanding the 64-bit seed with four
/// SplitMix64 steps (`mix(seed + i*gamma)` for `i = 1..=4`, little-endian
/// words). Two streams with equal seeds produce identical draws; a stream is
/// single-consumer and advancing it is the only state change any draw makes.
/// Floats are derived from the top 53 bits of each `u64` draw, so the
/// sequence does not depend on any distribution library internals.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        for i in 0..4 {
            let word = splitmix64_mix(seed.wrapping_add(GOLDEN_GAMMA.wrapping_mul(i as u64 + 1)));
            key[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
        }
        RngStream {
            seed,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream; see [`fork_seed`].
    pub fn fork(&self, child_index: u64) -> RngStream {
        RngStream::new(fork_seed(self.seed, child_index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` from the top 53 bits of one `u64`.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> Result<f64, NumError> {
        if lo > hi {
            return Err(NumError::argument(format!(
                "uniform bounds inverted: lo={lo} > hi={hi}"
            )));
        }
        if lo == hi {
            // Still consumes one draw so call sequences stay aligned.
            let _ = self.next_u64();
            return Ok(lo);
        }
        Ok(lo + self.unit_f64() * (hi - lo))
    }

    /// Uniform index in `[0, n)`. `n` is tiny everywhere this is used, so the
    /// modulo bias (< n / 2^64) is irrelevant; the simple reduction keeps the
    /// draw sequence easy to reimplement.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() on empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Tensor of uniform draws in `[lo, hi)`, row-major fill order.
    pub fn uniform<T: Real>(
        &mut self,
        lo: f64,
        hi: f64,
        shape: &[usize],
    ) -> Result<Tensor<T>, NumError> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::from_f64(self.uniform_f64(lo, hi)?));
        }
        Tensor::from_vec(shape.to_vec(), data)
    }

    /// Uniform sample of `n` distinct indices from `[0, len)`, in draw order
    /// (partial Fisher-Yates).
    pub fn sample_indices(&mut self, len: usize, n: usize) -> Result<Vec<usize>, NumError> {
        if n > len {
            return Err(NumError::argument(format!(
                "cannot sample {n} items from a population of {len}"
            )));
        }
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = i + self.index(len - i);
            pool.swap(i, j);
        }
        pool.truncate(n);
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_draws() {
        let mut a = RngStream::new(123);
        let mut b = RngStream::new(123);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_zero_width_is_zero() {
        let mut s = RngStream::new(7);
        let t: Tensor<f32> = s.uniform(0.0, 0.0, &[4]).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverted_bounds_error() {
        let mut s = RngStream::new(7);
        assert!(s.uniform::<f32>(1.0, 0.0, &[2]).is_err());
    }

    #[test]
    fn uniform_within_bounds() {
        let mut s = RngStream::new(99);
        let t: Tensor<f64> = s.uniform(-0.5, 0.25, &[1000]).unwrap();
        assert!(t.as_slice().iter().all(|&v| (-0.5..0.25).contains(&v)));
    }

    // Frozen reference sequence for the documented generator. Generated once
    // at first implementation; any change here is a breaking change to every
    // persisted result file.
    #[test]
    fn reference_sequence_is_frozen() {
        let mut s = RngStream::new(42);
        let words: Vec<u64> = (0..4).map(|_| s.next_u64()).collect();
        assert_eq!(
            words,
            vec![
                0x2c5f3a3aca27334e,
                0x1922a1741f363ddb,
                0x455e0b3934dcbe93,
                0xd3b65016244a6b3a,
            ]
        );

        let mut s = RngStream::new(42);
        let t: Tensor<f64> = s.uniform(0.0, 1.0, &[4]).unwrap();
        let expected = [
            0.17334102371366677,
            0.09819292099267837,
            0.27096373462968055,
            0.8270877968923689,
        ];
        for (got, want) in t.as_slice().iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn fork_seed_is_frozen() {
        assert_eq!(fork_seed(42, 0), 0x35cb60ab8a8b0d2b);
        assert_eq!(fork_seed(42, 1), 0xd34d4509a36e51d1);
        assert_ne!(fork_seed(42, 0), fork_seed(43, 0));
    }

    #[test]
    fn sample_indices_without_replacement() {
        let mut s = RngStream::new(5);
        let picks = s.sample_indices(10, 10).unwrap();
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!(s.sample_indices(3, 4).is_err());
    }
}
