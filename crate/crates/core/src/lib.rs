//! Text recognition recast as image captioning.
//!
//! A small vision encoder / text decoder Transformer reads a square image and
//! generates its transcript token by token. The crate carries everything the
//! model needs end to end: a tape-based autodiff engine and AdamW
//! ([`graph`], [`optim`]), the square-pad image transform ([`preprocess`]),
//! a synthetic multi-scenario corpus ([`data`]), staged training
//! ([`training`]), exact-match evaluation ([`eval`]) and a
//! detect → crop → recognize page pipeline ([`pipeline`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
mod gemm;
pub mod graph;
pub mod image;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor;

/// Seeded random stream used everywhere randomness is needed.
pub type RandomStream = rand_chacha::ChaCha8Rng;

/// Builds a [`RandomStream`] from a 64-bit seed.
pub fn stream(seed: u64) -> RandomStream {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Derives an independent seed from a base seed and a path of tags.
pub fn derive_seed(seed: u64, tags: &[&str]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
