//! Keyed random streams.
//!
//! Every random draw is addressed by `(seed, kind, index)`; the triple is used
//! directly as the ChaCha key, so any single entity can be regenerated without
//! replaying the draws that precede it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Entity kinds used as the second key component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    FamilyPrototype = 1,
    GenusPrototype = 2,
    SpeciesPrototype = 3,
    TeacherVariant = 4,
    ImageNoise = 5,
    AudioGenus = 6,
    AudioSpecies = 7,
    AudioNoise = 8,
    StudentEncoder = 9,
    StudentTextNoise = 10,
    Split = 11,
    ParamInit = 12,
    EpochShuffle = 13,
    PromptVariant = 14,
    RandomProjection = 15,
    GradCheck = 16,
    ChanceOracle = 17,
}

pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(kind as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"xmodal\0\x01");
    ChaCha8Rng::from_seed(key)
}

/// `len` independent standard normal draws scaled by `scale`.
pub fn gaussian_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
