//! Per-head rotation construction.
//!
//! The basis that compresses a head's Key channels is the dominant
//! eigenspace of the query-weighted centered Key covariance
//! `C_q = diag(σ) C diag(σ) = (σσᵀ) ⊙ C`, where `σ` holds per-channel norms
//! of a recent-query window. The default solver is truncated subspace
//! iteration with Cholesky-QR orthogonalization; a full Jacobi
//! eigendecomposition is available as the accuracy-oracle mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    self, cholesky, eigh_full, gram, matmul, solve_triangular_right, LinalgError, Matrix,
};

/// Default number of subspace iterations.
pub const DEFAULT_ITERATIONS: usize = 5;
/// Default trace-scaled ridge factor for the shifted Cholesky-QR.
pub const DEFAULT_RIDGE_EPSILON: f64 = 1e-6;
/// Default recent-query window length.
pub const DEFAULT_QUERY_WINDOW: usize = 32;

/// Orthonormality required of every returned basis.
const ORTHONORMALITY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RotationError {
    #[error("query window is empty")]
    EmptyWindow,
    #[error("negative query weight at channel {channel}")]
    NegativeWeight { channel: usize },
    #[error("invalid subspace config: {reason}")]
    InvalidConfig { reason: String },
    #[error("numerical breakdown in subspace iteration at iteration {iteration}: {source}")]
    NumericalBreakdown {
        iteration: usize,
        source: LinalgError,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-channel ℓ2 norms of the recent-query window.
#[derive(Debug, Clone)]
pub struct QueryWeights {
    sigma: Vec<f64>,
}

impl QueryWeights {
    pub fn new(sigma: Vec<f64>) -> Result<Self, RotationError> {
        if let Some(channel) = sigma.iter().position(|&v| v < 0.0 || !v.is_finite()) {
            return Err(RotationError::NegativeWeight { channel });
        }
        Ok(Self { sigma })
    }

    /// All-ones weights: collapses the weighted covariance to the plain
    /// centered covariance (query-agnostic mode).
    pub fn uniform(d: usize) -> Self {
        Self {
            sigma: vec![1.0; d],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sigma
    }
}

/// Centered covariance, its query-weighted counterpart, and the channel mean.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub centered: Matrix,
    pub weighted: Matrix,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    /// Truncated subspace iteration with shifted Cholesky-QR (the default).
    CholeskyIteration,
    /// Full Jacobi eigendecomposition; the accuracy oracle.
    FullEigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight channels by recent-query norms.
    QueryAware,
    /// Plain Key-only covariance (σ replaced by all-ones).
    QueryAgnostic,
}

/// Configuration for one basis construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceConfig {
    pub rank_k: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_ridge")]
    pub ridge_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: SolverMode,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE_EPSILON
}
fn default_mode() -> SolverMode {
    SolverMode::CholeskyIteration
}
fn default_weighting() -> Weighting {
    Weighting::QueryAware
}

impl SubspaceConfig {
    pub fn new(rank_k: usize, seed: u64) -> Self {
        Self {
            rank_k,
            iterations: DEFAULT_ITERATIONS,
            ridge_epsilon: DEFAULT_RIDGE_EPSILON,
            seed,
            mode: SolverMode::CholeskyIteration,
            weighting: Weighting::QueryAware,
        }
    }

    pub fn validate(&self, d: usize) -> Result<(), RotationError> {
        if self.rank_k == 0 || self.rank_k > d {
            return Err(RotationError::InvalidConfig {
                reason: format!("rank_k {} out of range 1..={d}", self.rank_k),
            });
        }
        if self.iterations == 0 {
            return Err(RotationError::InvalidConfig {
                reason: "iterations must be >= 1".into(),
            });
        }
        if self.ridge_epsilon <= 0.0 || !self.ridge_epsilon.is_finite() {
            return Err(RotationError::InvalidConfig {
                reason: "ridge_epsilon must be > 0".into(),
            });
        }
        Ok(())
    }

    /// Counter-based seed derivation so each (layer, head) pair draws an
    /// independent, reproducible initial basis.
    pub fn for_head(&self, layer: usize, head: usize) -> Self {
        let stream = ((layer as u64) << 32) | head as u64;
        Self {
            seed: derive_seed(self.seed, stream),
            ..self.clone()
        }
    }
}

/// Truncated rotation basis with the mean-correction data used at decode.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationState {
    /// Orthonormal d×k basis (columns are the retained rotated channels).
    pub basis: Matrix,
    /// Per-channel Key mean μ over the compressed tokens.
    pub mean: Vec<f64>,
    /// δμ = μ − R_k R_kᵀ μ: the mean component lost to truncation.
    pub mean_residual: Vec<f64>,
    pub rank_k: usize,
}

impl RotationState {
    /// Wraps an explicit orthonormal basis, deriving `δμ = μ − R_k R_kᵀ μ`.
    /// Useful for nested-rank sweeps that share one eigendecomposition.
    pub fn from_basis(basis: Matrix, mean: Vec<f64>) -> Self {
        let coords = basis_project(&basis, &mean);
        let back = basis_expand(&basis, &coords);
        let mean_residual = mean.iter().zip(&back).map(|(m, b)| m - b).collect();
        let rank_k = basis.cols();
        Self {
            basis,
            mean,
            mean_residual,
            rank_k,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.basis.rows()
    }
}

/// SplitMix64-style stream derivation. Used everywhere a reproducible
/// sub-seed is needed (per-head bases, synthetic tensors, sweep cells).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_INITIAL_BASIS: u64 = 0x5254_4b01;
const SALT_REFILL: u64 = 0x5254_4b02;

/// Per-channel ℓ2 norms of the columns of the query window.
pub fn query_channel_norms(q_window: &Matrix) -> Result<QueryWeights, RotationError> {
    if q_window.rows() == 0 || q_window.cols() == 0 {
        return Err(RotationError::EmptyWindow);
    }
    let d = q_window.cols();
    let mut sums = vec![0.0f64; d];
    for i in 0..q_window.rows() {
        for (s, &v) in sums.iter_mut().zip(q_window.row(i)) {
            *s += v * v;
        }
    }
    QueryWeights::new(sums.into_iter().map(f64::sqrt).collect())
}

/// Centered Key covariance `C = (K − 1μᵀ)ᵀ(K − 1μᵀ)` and the channel mean μ.
pub fn centered_covariance(keys: &Matrix) -> (Matrix, Vec<f64>) {
    let n = keys.rows();
    let d = keys.cols();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(keys.row(i)) {
            *m += v;
        }
    }
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut centered = keys.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    (gram(&centered), mean)
}

/// Query-weighted covariance via the rank-one Hadamard identity:
/// `C_q[i][j] = σᵢ σⱼ C[i][j]`, equal to `diag(σ) C diag(σ)` without
/// materializing the rescaled Keys.
pub fn weighted_covariance(c: &Matrix, sigma: &QueryWeights) -> Result<Matrix, RotationError> {
    let d = c.rows();
    if c.cols() != d || sigma.len() != d {
        return Err(LinalgError::DimensionMismatch {
            op: "weighted_covariance",
            left_rows: c.rows(),
            left_cols: c.cols(),
            right_rows: sigma.len(),
            right_cols: 1,
        }
        .into());
    }
    if let Some(channel) = sigma.as_slice().iter().position(|&v| v < 0.0) {
        return Err(RotationError::NegativeWeight { channel });
    }
    let s = sigma.as_slice();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out.set(i, j, s[i] * s[j] * c.get(i, j));
        }
    }
    Ok(out)
}

/// Builds both covariances plus the mean in one pass.
pub fn covariance_pair(
    keys: &Matrix,
    sigma: &QueryWeights,
) -> Result<CovariancePair, RotationError> {
    let (centered, mean) = centered_covariance(keys);
    let weighted = weighted_covariance(&centered, sigma)?;
    Ok(CovariancePair {
        centered,
        weighted,
        mean,
    })
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v: f64 = StandardNormal.sample(&mut rng);
            m.set(i, j, v);
        }
    }
    m
}

fn orthonormality_defect(v: &Matrix) -> f64 {
    let g = gram(v);
    let mut acc = 0.0f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let t = g.get(i, j) - if i == j { 1.0 } else { 0.0 };
            acc += t * t;
        }
    }
    acc.sqrt()
}

/// Modified Gram-Schmidt with re-orthogonalization; columns that collapse are
/// refilled with seeded random directions. Only reached when the iterated
/// panel is rank-deficient (covariance rank below k), where the trailing
/// subspace is genuinely arbitrary.
fn complete_orthonormal_basis(v: &Matrix, refill_seed: u64) -> Matrix {
    let d = v.rows();
    let k = v.cols();
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(k);
    let orthogonalize = |u: &mut Vec<f64>, kept: &[Vec<f64>]| {
        for _ in 0..2 {
            for q in kept {
                let proj = linalg::dot(u, q);
                for (ui, qi) in u.iter_mut().zip(q) {
                    *ui -= proj * qi;
                }
            }
        }
    };
    for j in 0..k {
        let mut u = v.column(j);
        orthogonalize(&mut u, &kept);
        let norm = linalg::norm2(&u);
        if norm > 1e-8 {
            for ui in &mut u {
                *ui /= norm;
            }
            kept.push(u);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(refill_seed);
    while kept.len() < k {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut u, &kept);
        let norm = linalg::norm2(&u);
        if norm > 1e-8 {
            for ui in &mut u {
                *ui /= norm;
            }
            kept.push(u);
        }
    }
    let mut out = Matrix::zeros(d, k);
    for (j, col) in kept.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out.set(i, j, x);
        }
    }
    out
}

/// One orthogonalization step: shifted Cholesky-QR guards against a
/// rank-deficient Gram matrix, then an unshifted pass removes the
/// ridge-induced distortion. Falls back to explicit basis completion when
/// the panel does not carry full column rank.
fn cholesky_qr(w: &Matrix, ridge_epsilon: f64, refill_seed: u64) -> Result<Matrix, LinalgError> {
    let k = w.cols();
    let mut g = gram(w);
    let rho = ridge_epsilon * g.trace() / k as f64;
    for i in 0..k {
        g.set(i, i, g.get(i, i) + rho);
    }
    let l = cholesky(&g)?;
    let v1 = solve_triangular_right(w, &l)?;

    let refined = match cholesky(&gram(&v1)) {
        Ok(l2) => solve_triangular_right(&v1, &l2)?,
        Err(LinalgError::NotPositiveDefinite { .. }) => {
            return Ok(complete_orthonormal_basis(&v1, refill_seed))
        }
        Err(e) => return Err(e),
    };
    if orthonormality_defect(&refined) > ORTHONORMALITY_TOL {
        return Ok(complete_orthonormal_basis(&refined, refill_seed));
    }
    Ok(refined)
}

/// Estimates the top-k eigenspace of `c_q` by subspace iteration.
///
/// Deterministic given `cfg.seed`. The returned columns are orthonormal; the
/// spanned subspace approximates the dominant eigenspace after
/// `cfg.iterations` multiplications. A covariance that annihilates the
/// current basis (for example the all-zero covariance of constant keys)
/// yields the orthonormalized random initial basis: any orthonormal basis is
/// equally valid there.
pub fn subspace_iterate(c_q: &Matrix, cfg: &SubspaceConfig) -> Result<Matrix, RotationError> {
    subspace_iterate_with(c_q, cfg, |_, _| {})
}

/// [`subspace_iterate`] with a per-iteration observer `(t, basis)`, invoked
/// after every orthogonalization. Used by instrumented tests.
pub fn subspace_iterate_with(
    c_q: &Matrix,
    cfg: &SubspaceConfig,
    mut on_step: impl FnMut(usize, &Matrix),
) -> Result<Matrix, RotationError> {
    let d = c_q.rows();
    cfg.validate(d)?;
    let sym = linalg::symmetrize_checked(c_q)?;
    let refill_seed = derive_seed(cfg.seed, SALT_REFILL);

    let v0 = gaussian_matrix(d, cfg.rank_k, derive_seed(cfg.seed, SALT_INITIAL_BASIS));
    let mut v = cholesky_qr(&v0, cfg.ridge_epsilon, refill_seed).map_err(|source| {
        RotationError::NumericalBreakdown {
            iteration: 0,
            source,
        }
    })?;
    on_step(0, &v);

    for t in 1..=cfg.iterations {
        let w = matmul(&sym, &v)?;
        if gram(&w).trace() <= 0.0 {
            // The covariance annihilates the basis; keep the previous
            // orthonormal iterate.
            return Ok(v);
        }
        v = cholesky_qr(&w, cfg.ridge_epsilon, derive_seed(refill_seed, t as u64)).map_err(
            |source| RotationError::NumericalBreakdown {
                iteration: t,
                source,
            },
        )?;
        on_step(t, &v);
    }
    Ok(v)
}

/// Builds the full rotation state for one head: query weights, covariances,
/// top-k basis, and the mean-correction residual `δμ = μ − R_k R_kᵀ μ`.
///
/// `rank_k` is clamped to `min(k, N, d)` since the covariance of N tokens
/// cannot carry more than N directions. Inputs are treated as opaque
/// activations; callers must supply queries in the same representation the
/// attention scores use.
pub fn build_rotation_state(
    keys: &Matrix,
    q_window: &Matrix,
    cfg: &SubspaceConfig,
) -> Result<RotationState, RotationError> {
    let d = keys.cols();
    if keys.rows() == 0 {
        return Err(RotationError::InvalidConfig {
            reason: "no keys to rotate".into(),
        });
    }
    if q_window.cols() != d {
        return Err(LinalgError::DimensionMismatch {
            op: "build_rotation_state",
            left_rows: keys.rows(),
            left_cols: d,
            right_rows: q_window.rows(),
            right_cols: q_window.cols(),
        }
        .into());
    }
    cfg.validate(d)?;

    let sigma = match cfg.weighting {
        Weighting::QueryAware => query_channel_norms(q_window)?,
        Weighting::QueryAgnostic => QueryWeights::uniform(d),
    };
    let cov = covariance_pair(keys, &sigma)?;

    let rank_k = cfg.rank_k.min(keys.rows()).min(d);
    let clamped_cfg = SubspaceConfig {
        rank_k,
        ..cfg.clone()
    };
    let basis = match cfg.mode {
        SolverMode::CholeskyIteration => subspace_iterate(&cov.weighted, &clamped_cfg)?,
        SolverMode::FullEigh => {
            let (_, vectors) = eigh_full(&cov.weighted)?;
            vectors.leading_columns(rank_k)
        }
    };

    let coords = basis_project(&basis, &cov.mean);
    let reconstructed = basis_expand(&basis, &coords);
    let mean_residual: Vec<f64> = cov
        .mean
        .iter()
        .zip(&reconstructed)
        .map(|(m, r)| m - r)
        .collect();

    Ok(RotationState {
        basis,
        mean: cov.mean,
        mean_residual,
        rank_k,
    })
}

/// `R_kᵀ x`: coordinates of `x` in the rotated basis.
pub fn basis_project(basis: &Matrix, x: &[f64]) -> Vec<f64> {
    linalg::vecmat(x, basis)
}

/// `R_k c`: expands rotated coordinates back to channel space.
pub fn basis_expand(basis: &Matrix, coords: &[f64]) -> Vec<f64> {
    linalg::matvec(basis, coords)
}
