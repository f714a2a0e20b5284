//! Named, indexed random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator for substream `(name, index)` of `seed`.
///
/// Different names or indices select different ChaCha streams of the same key,
/// so draws never depend on how work is scheduled across threads.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}

/// A derived 64-bit seed, for handing to code that takes a plain seed.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, name, index).next_u64()
}
