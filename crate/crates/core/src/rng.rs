//! Named, seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, stream, a, b)`, so e.g. the noise for trial 17 at optimizer step
//! 300 does not depend on how trials were scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Dropout = 2,
    Init = 3,
    OuNoise = 4,
    Shuffle = 5,
    Split = 6,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ a);
    h = splitmix(h ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(h)
}
