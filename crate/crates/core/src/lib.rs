//! Identification of neural ODE models with certified incremental
//! QSR-dissipativity.
//!
//! The crate is organised bottom-up:
//!
//! * [`matkit`]: dense symmetric linear algebra (Jacobi eigensolver, block assembly).
//! * [`simkit`]: Duffing ground truth, RK4, noisy datasets.
//! * [`neuralfield`]: the network vector field, rollouts, training.
//! * [`certkit`]: the certificate matrix `M_L`, supply rates and multiplier search.
//! * [`perturbkit`]: least-change weight perturbation onto the certified set.
//! * [`pipeline`]: end-to-end orchestration, persistence and metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certkit;
pub mod error;
pub mod matkit;
pub mod neuralfield;
pub mod perturbkit;
pub mod pipeline;
pub mod simkit;

pub use certkit::{Certificate, Multipliers, PBlocks, QsrFamily, QsrPreset, QsrSpec};
pub use error::{Error, Result};
pub use matkit::{DenseMatrix, SymEigResult};
pub use neuralfield::{Activation, Mlp, TrainConfig, TrainableMask};
pub use perturbkit::{PerturbResult, SolverConfig, SolverMode};
pub use pipeline::{PipelineConfig, RunReport};
pub use simkit::{Dataset, DuffingParams, Trajectory};

use sha2::{Digest, Sha256};

/// Derives an independent seed for sub-stream `index` (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hex SHA-256.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
