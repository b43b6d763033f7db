//! Deterministic pseudorandom numbers.
//!
//! The generator is xoshiro256** with 256 bits of state, seeded through
//! SplitMix64. Normal samples come from the Box-Muller transform over the
//! uniform stream. The algorithm is fixed project-wide: the same seed yields
//! the same sequence on every run. (Box-Muller calls `ln`/`cos`/`sin` from
//! the platform libm, which is stable on a given platform.)
//!
//! Consumers never share one stream: each use site derives its own stream
//! from `(root seed, name, index)` via [`stream_seed`], so adding a new
//! consumer cannot perturb existing ones.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the seed of a named child stream from a root seed.
///
/// `index` distinguishes repeated uses of the same name (per-step latent
/// draws, per-epoch shuffles). The derivation is a pure function, so stream
/// consumption never needs to be serialized.
pub fn stream_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut x = root ^ fnv1a64(name.as_bytes());
    let a = splitmix64(&mut x);
    x ^= index.wrapping_mul(GOLDEN);
    let b = splitmix64(&mut x);
    a ^ b.rotate_left(23)
}

/// xoshiro256** generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        if s == [0; 4] {
            s[0] = GOLDEN;
        }
        Rng { s }
    }

    /// Named child stream of a root seed; see [`stream_seed`].
    pub fn stream(root: u64, name: &str, index: u64) -> Self {
        Rng::from_seed(stream_seed(root, name, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        // Multiply-shift bounded draw; bias is negligible for n << 2^64 and
        // the same everywhere, which is all determinism needs.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller: one output per pair of uniforms, so
    /// the generator state stays exactly the four xoshiro words.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle of `items`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_streams_differ() {
        let mut a = Rng::stream(7, "weights_g", 0);
        let mut b = Rng::stream(7, "weights_d", 0);
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn stream_indices_differ() {
        assert_ne!(stream_seed(1, "latents", 0), stream_seed(1, "latents", 1));
    }

    #[test]
    fn normal_moments_close() {
        let mut rng = Rng::from_seed(7);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..1.1).contains(&var), "var {var}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = Rng::from_seed(3);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
