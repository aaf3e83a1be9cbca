//! Named random streams fanned out from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for `(seed, name, index)`. The name selects a ChaCha
/// stream id, so streams never overlap regardless of how much each consumes.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h ^ index.rotate_left(32));
    rng
}
