//! Deterministic seed derivation.
//!
//! Every stochastic site in the crate (init, dropout masks, shuffles, loss
//! sampling) draws from its own ChaCha stream whose seed is derived from the
//! master seed plus a domain tag and site coordinates. No global RNG state
//! exists, so results are independent of thread scheduling and checkpoint
//! resume only has to restore the master seed and the step counter.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated streams disjoint.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SAMPLE_LOSS: u64 = 4;
    pub const SYNTH: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix the master seed with a sequence of words into a stream seed.
pub fn derive_seed(master: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

/// FNV-1a, used to fold parameter names into seed words.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha stream for the given derived seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hands out one seed per stochastic site inside a (step, example) context,
/// numbered in graph-construction order.
#[derive(Debug, Clone)]
pub struct SeedStream {
    master: u64,
    ctx: Vec<u64>,
    next_site: u64,
}

impl SeedStream {
    pub fn new(master: u64, ctx: &[u64]) -> Self {
        Self {
            master,
            ctx: ctx.to_vec(),
            next_site: 0,
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        let mut words = self.ctx.clone();
        words.push(self.next_site);
        self.next_site += 1;
        derive_seed(self.master, &words)
    }
}
