//! Mixture of low-rank adapter experts over a frozen backbone.
//!
//! The crate provides a small reverse-mode autodiff engine ([`tensor`]), the
//! gated adapter layer ([`layer`]), the localized balancing constraint
//! ([`balancing`]), a toy residual backbone ([`model`]), a fixed-weight
//! Gaussian mixture analysis ([`mixture`]) and the experiment harness
//! ([`harness`]).

pub mod balancing;
pub mod error;
pub mod harness;
pub mod layer;
pub mod mixture;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::Group;
pub use tensor::{Graph, ParamStore, Real, Segments, Tensor, Var};

/// Deterministic RNG used everywhere in the crate.
pub type DetRng = rand_chacha::ChaCha8Rng;

/// Derives an independent child seed from a parent seed and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
