//! Seed derivation. Every random draw in a run comes from a ChaCha8 stream
//! keyed by (master seed, round, client, purpose), so adding clients or
//! purposes never shifts another stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Channel = 1,
    ArtificialNoise = 2,
    Coin = 3,
    Awgn = 4,
    Minibatch = 5,
    Task = 6,
}

/// Client slot used for server-side streams (AWGN, whole-round gain draws).
pub const SERVER: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, round: u64, client: u64, purpose: Purpose) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ round);
    h = splitmix64(h ^ client);
    splitmix64(h ^ purpose as u64)
}

pub fn stream(master: u64, round: u64, client: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, round, client, purpose))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
