//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 keyed by a 64-bit seed. Independent
//! substreams (one per frame, per phantom, per training step) use the ChaCha
//! stream id so results do not depend on evaluation order. Standard normals
//! come from `rand_distr::StandardNormal` (ziggurat method).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Name of the generator and normal transform, recorded in output metadata.
pub const RNG_DESCRIPTION: &str = "chacha8(seed_from_u64, stream=substream id); normals=ziggurat(rand_distr::StandardNormal)";

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normals_f64(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normals_f32(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}
