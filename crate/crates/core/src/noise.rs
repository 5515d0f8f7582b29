//! Counter-based randomness: every draw is keyed on the run seed and the
//! coordinates of the thing being randomized, so results do not depend on
//! the order in which they are requested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream tags separating independent uses of the same seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    AnchorBox = 1,
    AnchorConfidence = 2,
    Dropout = 3,
    DetectBox = 4,
    DetectConfidence = 5,
    Embedding = 6,
    Texture = 7,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed, stream and coordinate tuple into one 64-bit key.
pub fn key(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &c in coords {
        h = splitmix(h ^ c);
    }
    h
}

pub fn rng(seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, stream, coords))
}

pub fn uniform(seed: u64, stream: Stream, coords: &[u64]) -> f64 {
    rng(seed, stream, coords).random::<f64>()
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_depend_on_every_coordinate() {
        let k = key(1, Stream::Dropout, &[3, 4]);
        assert_eq!(k, key(1, Stream::Dropout, &[3, 4]));
        assert_ne!(k, key(2, Stream::Dropout, &[3, 4]));
        assert_ne!(k, key(1, Stream::DetectBox, &[3, 4]));
        assert_ne!(k, key(1, Stream::Dropout, &[4, 3]));
    }

    #[test]
    fn uniform_in_unit_interval() {
        for i in 0..1000 {
            let u = uniform(9, Stream::Texture, &[i]);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
