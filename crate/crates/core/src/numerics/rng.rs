use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every random draw in the crate.
pub type SeededRng = ChaCha8Rng;

/// Stream domains keep independent uses of one global seed from overlapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Shuffle = 3,
    Batch = 4,
    Eval = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent generator for `(seed, domain, index)`. The result
/// depends only on those three values, so work split across threads draws
/// the same numbers regardless of scheduling.
pub fn stream_rng(seed: u64, domain: Stream, index: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(splitmix(seed ^ splitmix(domain as u64)));
    rng.set_stream(index);
    rng
}
