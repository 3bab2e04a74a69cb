//! Rotation-based structured key-channel pruning for attention KV caches.
//!
//! The pipeline compresses the per-head Key states of visual tokens from `d`
//! to `k < d` channels by rotating the channel basis with a query-weighted
//! PCA basis and truncating, while Values and the prompt/text segment keep
//! the full dimension. Decode applies the cached rotation to the incoming
//! query, adds a scalar mean-correction bias, and merges sparse-channel
//! visual scores with full-channel text scores in one softmax.
//!
//! Modules:
//! - [`linalg`]: dense double-precision kernels (GEMM, Cholesky, triangular
//!   solves, Jacobi eigendecomposition) for small fixed shapes.
//! - [`rotation`]: per-head rotation construction (covariances, query
//!   weighting, Cholesky-based subspace iteration).
//! - [`cache`]: the compressed KV-cache model, prefill, and budget math.
//! - [`decode`]: decode-step attention, monolithic and split-K paths.
//! - [`baselines`]: head-wise and token-wise channel selection comparators.
//! - [`metrics`]: score residuals, divergences, and variance accounting.
//! - [`harness`]: synthetic data, trace container I/O, experiments, CLI.

pub mod baselines;
pub mod cache;
pub mod decode;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod rotation;

pub use error::Error;
