//! Counter-based Gaussian noise.
//!
//! Every draw is addressed by `(seed, domain, stream, counter)`: the ChaCha8
//! key comes from `(seed, domain)`, the ChaCha stream id is `stream`
//! (particle or path index), and the block position is a fixed multiple of
//! `counter` (step index). The same address always yields the same numbers,
//! independent of thread scheduling or of where a run was restarted.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent noise domains derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Brownian increments of the separated system.
    Separated = 1,
    /// Random initial conditions.
    Initial = 2,
    /// Brownian increments `B` of the original problem.
    OriginalNoise = 3,
    /// Regime chain paths of the original problem.
    OriginalChain = 4,
    /// Optimizer sampling.
    Optimizer = 5,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha8 key for `(seed, domain)`.
pub fn derive_key(seed: u64, domain: Domain) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut s = seed ^ (domain as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

/// Sequential generator for one `(seed, domain, stream)`.
pub fn stream_rng(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(derive_key(seed, domain));
    rng.set_stream(stream);
    rng
}

fn unit_open(bits: u64) -> f64 {
    // (0, 1]
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fills `out` with standard normals using Box-Muller, consuming exactly
/// `2 * ceil(len / 2)` 64-bit words.
pub fn fill_normals<R: RngCore>(rng: &mut R, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for pair in &mut chunks {
        let u1 = unit_open(rng.next_u64());
        let u2 = unit_open(rng.next_u64());
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        pair[0] = radius * angle.cos();
        if pair.len() > 1 {
            pair[1] = radius * angle.sin();
        }
    }
}

/// Random-access Gaussian vectors of a fixed dimension.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    key: [u8; 32],
    dim: usize,
    words_per_draw: u128,
}

impl NoiseSource {
    pub fn new(seed: u64, domain: Domain, dim: usize) -> Self {
        let pairs = dim.div_ceil(2) as u128;
        Self { key: derive_key(seed, domain), dim, words_per_draw: 4 * pairs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Standard normal vector number `counter` of `stream`.
    pub fn normals(&self, stream: u64, counter: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(stream);
        rng.set_word_pos(counter as u128 * self.words_per_draw);
        fill_normals(&mut rng, out);
    }

    /// Brownian increment over `substeps` consecutive fine cells of width
    /// `fine_dt`, starting at fine index `first`. Coarse steps built this
    /// way share their noise with finer grids.
    pub fn increment(&self, stream: u64, first: u64, substeps: u64, fine_dt: f64, out: &mut [f64], scratch: &mut [f64]) {
        let scale = fine_dt.sqrt();
        out.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..substeps {
            self.normals(stream, first + s, scratch);
            for (o, z) in out.iter_mut().zip(scratch.iter()) {
                *o += scale * z;
            }
        }
    }
}
