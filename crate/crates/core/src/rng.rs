//! Deterministic random streams keyed by `(seed, point, trial)`.
//!
//! Every Monte Carlo trial owns its generator, so results do not depend on
//! how trials are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one trial. Distinct points get distinct keys; distinct
/// trials get distinct ChaCha streams under the same key.
pub fn stream_rng(seed: u64, point: u64, trial: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed) ^ splitmix64(point.wrapping_add(0x5851_F42D_4C95_7F2D)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(trial);
    rng
}
