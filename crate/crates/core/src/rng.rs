//! Seeded random streams.
//!
//! Every source of randomness in a simulation (connectivity, membrane
//! noise, device switching, input spikes, ...) draws from its own ChaCha8
//! stream. All streams share the key derived from the master seed and differ
//! only in the 64-bit stream id, so perturbing one source never shifts the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a stream is used for. The discriminant occupies the top 16 bits of
/// the ChaCha stream id; the low 48 bits carry an entity or epoch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Purpose {
    Connectivity = 1,
    Membership = 2,
    Noise = 3,
    Device = 4,
    Input = 5,
    Stimulus = 6,
    Trial = 7,
    Calibration = 8,
}

const INDEX_MASK: u64 = (1 << 48) - 1;

/// Returns the stream for `(purpose, index)` under `master`.
pub fn stream(master: u64, purpose: Purpose, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((purpose as u64) << 48) | (index & INDEX_MASK));
    rng
}

/// SplitMix64 finaliser; used to derive child seeds (one per sweep point or
/// trial) from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
