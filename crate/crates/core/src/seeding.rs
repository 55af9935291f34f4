//! Seed derivation.
//!
//! Every random stream in the laboratory is a `ChaCha8Rng` seeded from a
//! 64-bit value derived from the root seed. Derivations only use the
//! functions below, so they are reproducible across platforms and
//! independent of thread scheduling.
//!
//! * [`fmix64`] is the MurmurHash3 64-bit finalizer. It is a bijection with
//!   `fmix64(0) == 0`.
//! * [`grid_seed`] is `root ^ fmix64(index)`: grid point 0 keeps the root
//!   seed and appending grid points never changes earlier seeds.
//! * [`stream_seed`] folds a sequence of words into the root with
//!   `splitmix64(acc ^ fmix64(word))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fmix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the bytes of an identifier.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of grid point `index` in a sweep rooted at `root`.
pub fn grid_seed(root: u64, index: u64) -> u64 {
    root ^ fmix64(index)
}

pub fn stream_seed(root: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(root), |acc, &w| splitmix64(acc ^ fmix64(w)))
}

pub fn stream(root: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, words))
}

/// Stream dedicated to one group member of one prompt at one training step.
pub fn rollout_stream(root: u64, step: u64, prompt_id: &str, member: u64) -> ChaCha8Rng {
    stream(
        root,
        &[0x726f_6c6c, step, fnv1a(prompt_id.as_bytes()), member],
    )
}
