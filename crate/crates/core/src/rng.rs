//! Seeded, splittable random source.
//!
//! Backed by ChaCha8 in counter mode. A child generator is obtained with
//! [`Rng::fork`], which selects a distinct ChaCha stream from a tag and an
//! index; the child's draws do not depend on how much the parent has been
//! used. Identical seeds give identical sequences on every platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator keyed by `(tag, index)` under the same seed.
    pub fn fork(&self, tag: &str, index: u64) -> Rng {
        // FNV-1a over the tag, then mix in the parent stream and index.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= self.stream.rotate_left(17);
        h = splitmix(h ^ splitmix(index));
        Self::with_stream(self.seed, h)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn coin(&mut self) -> bool {
        self.inner.next_u32() & 1 == 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn fork_ignores_parent_usage() {
        let a = Rng::new(3);
        let mut b = Rng::new(3);
        for _ in 0..10 {
            b.next_u64();
        }
        assert_eq!(a.fork("conv", 2).next_u64(), b.fork("conv", 2).next_u64());
        assert_ne!(a.fork("conv", 2).next_u64(), a.fork("conv", 3).next_u64());
        assert_ne!(a.fork("conv", 2).next_u64(), a.fork("leni", 2).next_u64());
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Rng::new(1).shuffle(&mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }

    #[test]
    fn uniform_in_range() {
        let mut r = Rng::new(11);
        for _ in 0..1000 {
            let u = r.uniform(0.125, 1.0 / 3.0);
            assert!((0.125..1.0 / 3.0).contains(&u));
        }
    }
}
