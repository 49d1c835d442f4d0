//! Seed plumbing. A run takes exactly one user-facing seed; everything that
//! needs randomness (weight init, label sampling, noise, shuffling,
//! augmentation draws) pulls a named stream derived from it. Streams are
//! independent ChaCha8 generators, so adding a new consumer never shifts the
//! values an existing consumer sees, and results do not depend on the order
//! in which components are constructed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A point in the seed namespace. `derive` walks one level down, `rng`
/// produces a generator for a leaf label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    state: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { state: mix(0x5331_4e46_5553_4544, &seed.to_le_bytes()) }
    }

    /// Child namespace, e.g. `streams.derive("derm_backbone")`.
    pub fn derive(&self, label: &str) -> Streams {
        Streams { state: mix(self.state, label.as_bytes()) }
    }

    /// Generator for a named stream under this namespace.
    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(label).state)
    }
}

/// FNV-1a over the bytes, folded into the parent state, then finished with
/// the splitmix64 scrambler. Fixed constants; the derivation is part of the
/// reproducibility contract and must never change.
fn mix(parent: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ parent;
    for &b in parent.to_le_bytes().iter().chain(bytes) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
