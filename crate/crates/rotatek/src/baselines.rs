//! Comparator channel-pruning strategies.
//!
//! These are deliberately labeled "-style": the published scoring functions
//! of the methods they stand in for are not specified here, so the head-wise
//! selector scores channels by `σ_j · ‖K_:,j‖₂` and the token-wise selector
//! keeps per-token top-k magnitudes with optional mean interpolation. They
//! exist to compare selection in the original channel basis against rotation
//! into an aligned basis, not to reproduce any published accuracy numbers.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::rotation::QueryWeights;

/// Largest head dimension accepted by the exhaustive subset search.
pub const SUBSET_SEARCH_MAX_DIM: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("keep count {k} out of range 1..={d}")]
    BadKeepCount { k: usize, d: usize },
    #[error("dimension {d} exceeds exhaustive-search guard {limit}")]
    DimensionTooLarge { d: usize, limit: usize },
    #[error("sigma length {got} does not match channel count {expected}")]
    SigmaLength { got: usize, expected: usize },
}

/// Channel-pruning mask. Head-wise masks share one keep set across tokens
/// (`d` bits per head); token-wise masks store an independent set per token
/// (`N·d` bits per head).
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelMask {
    HeadWise { keep: Vec<bool> },
    TokenWise { keep: Vec<Vec<bool>> },
}

impl ChannelMask {
    /// Mask storage overhead in bits for one head.
    pub fn overhead_bits(&self) -> u64 {
        match self {
            ChannelMask::HeadWise { keep } => keep.len() as u64,
            ChannelMask::TokenWise { keep } => {
                keep.len() as u64 * keep.first().map_or(0, |r| r.len() as u64)
            }
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            ChannelMask::HeadWise { .. } => "head_wise",
            ChannelMask::TokenWise { .. } => "token_wise",
        }
    }
}

fn check_keep_count(k: usize, d: usize) -> Result<(), BaselineError> {
    if k == 0 || k > d {
        return Err(BaselineError::BadKeepCount { k, d });
    }
    Ok(())
}

/// Deterministic top-k by score, ties broken by lower index.
fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = idx.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

/// Head-wise channel selection: saliency `σ_j · ‖K_:,j‖₂`, keep the top k.
pub fn headwise_select(
    keys: &Matrix,
    sigma: &QueryWeights,
    k: usize,
) -> Result<ChannelMask, BaselineError> {
    let d = keys.cols();
    check_keep_count(k, d)?;
    if sigma.len() != d {
        return Err(BaselineError::SigmaLength {
            got: sigma.len(),
            expected: d,
        });
    }
    let mut saliency = vec![0.0f64; d];
    for i in 0..keys.rows() {
        for (s, &v) in saliency.iter_mut().zip(keys.row(i)) {
            *s += v * v;
        }
    }
    for (s, &w) in saliency.iter_mut().zip(sigma.as_slice()) {
        *s = s.sqrt() * w;
    }
    let mut keep = vec![false; d];
    for j in top_k_indices(&saliency, k) {
        keep[j] = true;
    }
    Ok(ChannelMask::HeadWise { keep })
}

/// Zeroes the channels a head-wise mask prunes. The kept channels carry the
/// scores a sparse-channel decoder would compute.
pub fn headwise_reconstruct(keys: &Matrix, mask: &ChannelMask) -> Matrix {
    let ChannelMask::HeadWise { keep } = mask else {
        panic!("headwise_reconstruct needs a head-wise mask");
    };
    let mut out = keys.clone();
    for i in 0..out.rows() {
        for (v, &kept) in out.row_mut(i).iter_mut().zip(keep) {
            if !kept {
                *v = 0.0;
            }
        }
    }
    out
}

/// Token-wise selection: per row keep the k largest magnitudes; pruned
/// entries become zero, or the per-head per-channel mean when
/// `interpolate_mean` is set. Returns the mask plus the reconstructed keys.
pub fn tokenwise_select(
    keys: &Matrix,
    k: usize,
    interpolate_mean: bool,
) -> Result<(ChannelMask, Matrix), BaselineError> {
    let d = keys.cols();
    let n = keys.rows();
    check_keep_count(k, d)?;

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

    let mut keep_rows = Vec::with_capacity(n);
    let mut recon = keys.clone();
    for i in 0..n {
        let mags: Vec<f64> = keys.row(i).iter().map(|v| v.abs()).collect();
        let mut keep = vec![false; d];
        for j in top_k_indices(&mags, k) {
            keep[j] = true;
        }
        for (j, (v, &kept)) in recon.row_mut(i).iter_mut().zip(&keep).enumerate() {
            if !kept {
                *v = if interpolate_mean { mean[j] } else { 0.0 };
            }
        }
        keep_rows.push(keep);
    }
    Ok((ChannelMask::TokenWise { keep: keep_rows }, recon))
}

/// Exhaustively minimizes `‖K_c − K_c Π_S‖_F²` over all `C(d,k)` coordinate
/// subsets of the centered keys. Combinatorial, so guarded to small `d`;
/// this is the oracle behind the rotation-dominates-selection property.
pub fn exhaustive_subset_error(
    keys: &Matrix,
    k: usize,
) -> Result<(Vec<usize>, f64), BaselineError> {
    let d = keys.cols();
    check_keep_count(k, d)?;
    if d > SUBSET_SEARCH_MAX_DIM {
        return Err(BaselineError::DimensionTooLarge {
            d,
            limit: SUBSET_SEARCH_MAX_DIM,
        });
    }
    let n = keys.rows();
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
    // Dropping column j of the centered keys costs exactly its squared norm.
    let mut col_sq = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in keys.row(i).iter().enumerate() {
            let c = v - mean[j];
            col_sq[j] += c * c;
        }
    }

    let mut best_subset = Vec::new();
    let mut best_err = f64::INFINITY;
    for mask in 0u32..(1u32 << d) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let mut err = 0.0f64;
        for (j, &sq) in col_sq.iter().enumerate() {
            if mask & (1 << j) == 0 {
                err += sq;
            }
        }
        if err < best_err {
            best_err = err;
            best_subset = (0..d).filter(|j| mask & (1 << j) != 0).collect();
        }
    }
    Ok((best_subset, best_err))
}
