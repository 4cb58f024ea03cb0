//! Deterministic RNG stream derivation.
//!
//! Every stochastic routine in this crate draws from a ChaCha12 stream whose
//! 256-bit seed is derived from the master seed through a chain of
//! SplitMix64 mixes. Streams for (master seed, replicate index) pairs are
//! independent by construction, so replicates can run on any number of
//! threads and still produce bit-identical output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Name of the generator, recorded in run metadata.
pub const GENERATOR_NAME: &str = "ChaCha12";

/// SplitMix64 finalizer (Steele, Lea, Flood 2014).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A 256-bit key identifying one RNG stream in the derivation tree.
///
/// Keys form a tree: `root(seed)` is the root, `child(i)` descends one
/// level. The forward simulator uses `root(seed).child(replicate)`; spine
/// subtrees descend further by fission index and child slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey([u64; 4]);

impl StreamKey {
    const LANE_SALTS: [u64; 4] = [
        0x8000_0000_0000_0001,
        0x9e37_79b9_7f4a_7c15,
        0xc2b2_ae3d_27d4_eb4f,
        0x1656_67b1_9e37_79f9,
    ];

    /// Root key for a master seed.
    pub fn root(master_seed: u64) -> Self {
        let mut lanes = [0u64; 4];
        for (i, lane) in lanes.iter_mut().enumerate() {
            *lane = mix(master_seed ^ Self::LANE_SALTS[i]);
        }
        StreamKey(lanes)
    }

    /// Derive the `index`-th child key.
    pub fn child(self, index: u64) -> Self {
        let mut lanes = [0u64; 4];
        for (i, lane) in lanes.iter_mut().enumerate() {
            *lane = mix(self.0[i] ^ mix(index ^ Self::LANE_SALTS[i]));
        }
        StreamKey(lanes)
    }

    /// Instantiate the ChaCha12 stream for this key.
    pub fn rng(self) -> ChaCha12Rng {
        let mut seed = [0u8; 32];
        for (i, lane) in self.0.iter().enumerate() {
            seed[8 * i..8 * (i + 1)].copy_from_slice(&lane.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }
}

/// Stream for one forward replicate: `hash(master seed, replicate index)`.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha12Rng {
    StreamKey::root(master_seed).child(replicate).rng()
}

/// Exponential variate with the given rate; `None` when the rate is zero
/// (the clock never rings).
pub fn exp_variate<R: rand::Rng>(rng: &mut R, rate: f64) -> Option<f64> {
    if rate <= 0.0 {
        return None;
    }
    let u: f64 = rng.random();
    // u in [0,1); 1-u in (0,1] keeps ln finite
    Some(-(1.0 - u).ln() / rate)
}
