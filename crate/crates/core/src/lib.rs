//! Dense-and-implicit attention (DIA) workbench.
//!
//! One channel-attention module, carrying LSTM state, is shared by every
//! block of a residual stage. The crate provides the autodiff engine it runs
//! on, the attention cells and per-block baselines, residual backbones,
//! a deterministic training harness, exact parameter accounting and the
//! diagnostic analyses over recorded attention maps.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

/// Seeded generators. ChaCha streams are stable across platforms and
/// crate versions, which the determinism guarantees rely on.
pub mod rng {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent stream derived from `seed` and a purpose tag.
    pub fn derived(seed: u64, tag: u64) -> ChaCha8Rng {
        let mixed = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
        ChaCha8Rng::seed_from_u64(mixed)
    }
}
