//! Small helpers shared by every module: named tensor maps, seeded RNG
//! streams and finiteness checks.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayBase, Data, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Ordered map of named 2-D tensors. Ordering makes serialization stable.
pub type NamedTensors = BTreeMap<String, Array2<f64>>;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    BackboneInit = 1,
    AdapterInit = 2,
    Extractor = 3,
    TextEncoder = 4,
    RecordPick = 10,
    Timestep = 11,
    Noise = 12,
    Reference = 13,
    TextDropout = 14,
    FaceDropout = 15,
    Sampling = 20,
    Corpus = 30,
    Clip = 31,
    Pool = 32,
}

/// A ChaCha stream keyed by `(seed, stream, index)`.
///
/// Keying by index (usually the training step or a video hash) means any
/// position in a run can be reproduced without replaying earlier draws.
pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

/// Platform-independent 64-bit hash of a string.
pub fn stable_hash64(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn all_finite<S, D>(a: &ArrayBase<S, D>) -> bool
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    a.iter().all(|x| x.is_finite())
}

/// Round every entry to the nearest `f32`. Stored parameters live on the
/// `f32` grid so checkpoints round-trip bit for bit.
pub fn round_to_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

/// `rows × cols` matrix of `N(0, std²)` draws, rounded to `f32`.
pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng) as f32 as f64)
}

/// Rectangular identity: ones on the main diagonal.
pub fn eye(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, c)| if r == c { 1.0 } else { 0.0 })
}

/// SHA-256 over names, shapes and little-endian values.
pub fn checksum(tensors: &NamedTensors) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update((t.nrows() as u64).to_le_bytes());
        h.update((t.ncols() as u64).to_le_bytes());
        for x in t.iter() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
