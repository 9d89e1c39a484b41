//! Counter-addressed random streams.
//!
//! Every draw is a pure function of (master seed, module, experiment, path, step),
//! so results do not depend on thread count or scheduling order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Word budget reserved for each step inside a path stream.
const WORDS_PER_STEP: u128 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u32)]
pub enum Module {
    Spectral = 1,
    Ou = 2,
    Regularization = 3,
    Mild = 4,
    Girsanov = 5,
    Verify = 6,
    Runner = 7,
    Coefficients = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub module: u32,
    pub experiment: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64, module: Module, experiment: u64) -> Self {
        Self { seed, module: module as u32, experiment }
    }

    /// Derives an independent key, e.g. for a nested estimator or a second starting point.
    pub fn child(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            module: self.module,
            experiment: splitmix(self.experiment ^ splitmix(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    fn chacha_seed(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        let mut state = splitmix(self.seed) ^ splitmix(self.module as u64 + 17) ^ self.experiment;
        for chunk in out.chunks_mut(8) {
            state = splitmix(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        out
    }

    pub fn path(&self, index: u64) -> PathStream {
        let mut rng = ChaCha8Rng::from_seed(self.chacha_seed());
        rng.set_stream(index);
        PathStream { rng }
    }
}

/// Random source for one Monte Carlo path; each step addresses its own block of the stream.
#[derive(Debug, Clone)]
pub struct PathStream {
    rng: ChaCha8Rng,
}

impl PathStream {
    /// Fills `out` with independent N(0, dt) increments for the given step.
    pub fn increments(&mut self, step: u64, dt: f64, out: &mut [f64]) {
        self.normals(step, out);
        let scale = dt.sqrt();
        for w in out.iter_mut() {
            *w *= scale;
        }
    }

    /// Fills `out` with standard normals for the given step.
    pub fn normals(&mut self, step: u64, out: &mut [f64]) {
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        for w in out.iter_mut() {
            *w = StandardNormal.sample(&mut self.rng);
        }
    }

    /// Uniform draw in [0, 1) tied to a step address.
    pub fn uniform(&mut self, step: u64) -> f64 {
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_draws() {
        let key = StreamKey::new(7, Module::Ou, 3);
        let mut a = [0.0; 5];
        let mut b = [0.0; 5];
        key.path(11).increments(4, 0.01, &mut a);
        let mut s = key.path(11);
        s.increments(9, 0.01, &mut b);
        s.increments(4, 0.01, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn different_paths_and_modules_differ() {
        let key = StreamKey::new(7, Module::Ou, 3);
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        key.path(0).normals(0, &mut a);
        key.path(1).normals(0, &mut b);
        assert_ne!(a, b);
        StreamKey::new(7, Module::Mild, 3).path(0).normals(0, &mut b);
        assert_ne!(a, b);
        key.child(1).path(0).normals(0, &mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn normals_have_unit_variance() {
        let key = StreamKey::new(1, Module::Verify, 0);
        let mut buf = [0.0; 8];
        let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
        for p in 0..5000 {
            let mut st = key.path(p);
            for k in 0..4 {
                st.normals(k, &mut buf);
                for &x in &buf {
                    s1 += x;
                    s2 += x * x;
                    n += 1.0;
                }
            }
        }
        let mean = s1 / n;
        let var = s2 / n - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
