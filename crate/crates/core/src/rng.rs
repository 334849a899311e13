//! Named random streams derived from one run seed, so each pipeline stage can
//! be re-run on its own and still draw the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dataset = 1,
    InitGenerator = 2,
    InitDiscriminator = 3,
    Training = 4,
    PlaneC = 5,
    Cropping = 6,
    Sweep = 7,
    Evaluation = 8,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Stream `stream` of the sub-seed derived for item `index`.
pub fn item_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    stream_rng(mix(seed, index), stream)
}

/// SplitMix64 finalizer over `seed + index`, used to derive per-item seeds.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream_rng(9, Stream::Dataset).random();
        let b: u64 = stream_rng(9, Stream::Training).random();
        let a2: u64 = stream_rng(9, Stream::Dataset).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
