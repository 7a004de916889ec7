//! Counter-addressed Gaussian streams keyed by `(seed, replica, step)`.
//!
//! Each step consumes a fixed number of ChaCha words, so any step of any
//! replica can be regenerated by seeking without replaying the prefix.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ChaCha words (32-bit) consumed per pair of normals.
const WORDS_PER_PAIR: u128 = 4;

pub struct NormalStream {
    rng: ChaCha8Rng,
    dim: usize,
    step: u64,
}

impl NormalStream {
    pub fn new(seed: u64, replica: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replica);
        rng.set_word_pos(0);
        Self { rng, dim, step: 0 }
    }

    pub fn words_per_step(&self) -> u128 {
        (self.dim as u128).div_ceil(2) * WORDS_PER_PAIR
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Positions the stream at the start of `step`.
    pub fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * self.words_per_step());
        self.step = step;
    }

    /// Fills `out` (length `dim`) with the standard normals of the current
    /// step and advances to the next.
    pub fn fill(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut chunks = out.chunks_mut(2);
        for pair in &mut chunks {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            pair[0] = z0;
            if pair.len() > 1 {
                pair[1] = z1;
            }
        }
        self.step += 1;
    }
}

fn unit_open_closed(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn unit_closed_open(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals from two uniform words.
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let r = (-2.0 * unit_open_closed(a).ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * unit_closed_open(b)).sin_cos();
    (r * c, r * s)
}
