//! Deterministic row sampling.
//!
//! The procedure is fixed so that independent implementations agree:
//!
//! 1. Generator: ChaCha with 8 rounds, seeded through
//!    `ChaCha8Rng::seed_from_u64(seed)` (the `rand_core` PCG32 seed expansion).
//! 2. Bounded integers in `[0, m)`: Lemire's widening multiply on `next_u64`,
//!    rejecting the low word when it falls below `(2^64 - m) mod m`.
//! 3. Selection: partial Fisher-Yates over `0..n`, i.e. for `i in 0..count`
//!    swap position `i` with `i + below(n - i)`; the first `count` slots are
//!    the sample, returned in ascending order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator for `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform integer in `[0, bound)`. `bound` must be nonzero.
pub fn below<R: RngCore>(rng: &mut R, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let wide = u128::from(rng.next_u64()) * u128::from(bound);
        if (wide as u64) >= threshold {
            return (wide >> 64) as u64;
        }
    }
}

/// `count` distinct indices from `0..n`, ascending. Continues the given stream.
pub fn sample_indices<R: RngCore>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    assert!(count <= n, "cannot sample {count} of {n}");
    let mut slots: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + below(rng, (n - i) as u64) as usize;
        slots.swap(i, j);
    }
    slots.truncate(count);
    slots.sort_unstable();
    slots
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_stays_in_range() {
        let mut rng = seeded(3);
        for bound in [1u64, 2, 3, 7, 1000, u64::MAX] {
            for _ in 0..200 {
                assert!(below(&mut rng, bound) < bound);
            }
        }
    }

    #[test]
    fn sample_is_sorted_and_distinct() {
        let mut rng = seeded(11);
        let s = sample_indices(&mut rng, 500, 123);
        assert_eq!(s.len(), 123);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(*s.last().unwrap() < 500);
    }

    #[test]
    fn full_sample_is_identity() {
        let mut rng = seeded(0);
        assert_eq!(sample_indices(&mut rng, 9, 9), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn roughly_uniform() {
        // each of 10 rows picked with probability 3/10
        let mut counts = [0usize; 10];
        let mut rng = seeded(42);
        for _ in 0..20_000 {
            for i in sample_indices(&mut rng, 10, 3) {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((5_700..6_300).contains(&c), "{counts:?}");
        }
    }
}
