//! Deterministic derivation of per-role random streams.
//!
//! Every stochastic stage of a run (pair generation chunk, per-arm routing
//! chunk, each detector's photon/dark/trap/jitter draws) owns an independent
//! ChaCha stream derived from the run seed, a fixed role salt, and an
//! optional chunk index. Draw sequences therefore never depend on another
//! stage, on batch width, or on thread count, which is what makes runs
//! bit-reproducible under any parallel schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent generator for (`seed`, `salt`, `index`).
pub fn derive_rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut x = mix(seed ^ mix(salt));
    x = mix(x ^ mix(index.rotate_left(32)));
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        x = mix(x.wrapping_add(1 + i as u64));
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Role salts. Values are arbitrary but frozen: changing them changes every
/// simulated stream.
pub mod salt {
    use crate::types::Arm;

    pub const PAIR_SOURCE: u64 = 0x01;
    pub const PULSED_SOURCE: u64 = 0x02;

    pub fn route(arm: Arm) -> u64 {
        0x10 + arm.as_u8() as u64
    }

    /// Detector channels get one salt per internal draw purpose.
    pub fn detector(channel: u8, purpose: DetectorDraw) -> u64 {
        0x100 + (channel as u64) * 8 + purpose as u64
    }

    #[derive(Clone, Copy)]
    pub enum DetectorDraw {
        Photon = 0,
        Dark = 1,
        Trap = 2,
        Jitter = 3,
    }
}
