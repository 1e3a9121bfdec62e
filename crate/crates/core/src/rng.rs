//! Deterministic random streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 stream
//! seeded from a job seed plus a purpose tag, so independent concerns
//! (parameter init, noise injection, attack starts) never share or
//! reorder draws. ChaCha8 is platform-independent, which keeps whole
//! runs bitwise reproducible from their config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream for a (job seed, purpose) pair.
pub fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    // FNV-1a over the purpose tag, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
