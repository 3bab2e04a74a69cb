//! Compressed KV-cache data model and the prefill pipeline.
//!
//! Prefill applies the token mask, builds one rotation state per kv head
//! from the surviving visual keys, and stores the rotated-truncated visual
//! keys next to full-channel values and the untouched prompt/text segment.
//! Cached tensors are single precision; all rotation math stays in double
//! precision, with the downcast happening after `K · R_k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matmul, LinalgError, Matrix, MatrixF32};
use crate::rotation::{build_rotation_state, RotationError, RotationState, SubspaceConfig};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("invalid layout: {reason}")]
    InvalidLayout { reason: String },
    #[error("token mask length {mask_len} does not match visual token count {expected}")]
    MaskLength { mask_len: usize, expected: usize },
    #[error("token mask removes every visual token")]
    EmptyVisual,
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error("budget ratio {name}={value} outside (0, 1]")]
    BadRatio { name: &'static str, value: f64 },
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Static geometry of one cached sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Visual token count (S_v).
    pub n_visual: usize,
    /// Prompt + text token count (S_full).
    pub n_text: usize,
    /// Head dimension.
    pub d: usize,
    /// Query heads.
    pub heads_q: usize,
    /// Key/value heads; `heads_q` must be an integer multiple.
    pub heads_kv: usize,
}

impl SequenceLayout {
    pub fn validate(&self) -> Result<(), CacheError> {
        if self.d == 0 {
            return Err(CacheError::InvalidLayout {
                reason: "d must be >= 1".into(),
            });
        }
        if self.heads_kv == 0 || self.heads_q == 0 {
            return Err(CacheError::InvalidLayout {
                reason: "head counts must be >= 1".into(),
            });
        }
        if !self.heads_q.is_multiple_of(self.heads_kv) {
            return Err(CacheError::InvalidLayout {
                reason: format!(
                    "heads_q {} is not a multiple of heads_kv {}",
                    self.heads_q, self.heads_kv
                ),
            });
        }
        Ok(())
    }

    /// Query heads sharing one kv head.
    #[inline]
    pub fn group_size(&self) -> usize {
        self.heads_q / self.heads_kv
    }

    /// GQA mapping `h_kv = ⌊h / (H_q/H_kv)⌋`.
    #[inline]
    pub fn kv_head_for(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }
}

/// Per-kv-head prefill activations. Visual tensors cover the pre-pruning
/// token count; the text segment is cached as-is.
#[derive(Debug, Clone)]
pub struct HeadData {
    pub visual_keys: Matrix,
    pub visual_values: Matrix,
    pub text_keys: Matrix,
    pub text_values: Matrix,
}

/// Everything prefill consumes: per-kv-head activations plus one recent-query
/// window per query head.
#[derive(Debug, Clone)]
pub struct PrefillInput {
    pub heads: Vec<HeadData>,
    pub query_windows: Vec<Matrix>,
}

/// One kv head's compressed cache segment.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    /// Rotated-truncated visual keys `K̃ = K R_k`, N×k.
    pub visual_keys_rot: MatrixF32,
    /// Visual values at the full channel dimension (truncation is a basis
    /// change for the score product only).
    pub visual_values: MatrixF32,
    pub text_keys: MatrixF32,
    pub text_values: MatrixF32,
    pub rotation: RotationState,
}

/// Write-once compressed cache, immutable after prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    /// Geometry after token pruning (`n_visual` = surviving count).
    pub layout: SequenceLayout,
    /// Rank requested before any clamping; per-head actual rank lives in the
    /// rotation state.
    pub requested_rank: usize,
    pub heads: Vec<HeadCache>,
}

impl CompressedCache {
    #[inline]
    pub fn n_visual(&self) -> usize {
        self.layout.n_visual
    }

    #[inline]
    pub fn n_text(&self) -> usize {
        self.layout.n_text
    }

    /// True when any head's rank was clamped below the requested rank.
    pub fn rank_clamped(&self) -> bool {
        self.heads
            .iter()
            .any(|h| h.rotation.rank_k < self.requested_rank)
    }
}

fn keep_rows(m: &Matrix, mask: &[bool]) -> Matrix {
    let kept_rows: Vec<Vec<f64>> = mask
        .iter()
        .zip(0..m.rows())
        .filter(|&(&keep, _i)| keep)
        .map(|(&_keep, i)| m.row(i).to_vec())
        .collect();
    let cols = m.cols();
    if kept_rows.is_empty() {
        return Matrix::zeros(0, cols);
    }
    Matrix::from_rows(&kept_rows).expect("filtered rows keep the column count")
}

fn concat_rows(mats: &[&Matrix]) -> Result<Matrix, CacheError> {
    let cols = mats.first().map_or(0, |m| m.cols());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for m in mats {
        if m.cols() != cols {
            return Err(CacheError::Shape {
                what: format!("query window column mismatch: {} vs {}", m.cols(), cols),
            });
        }
        for i in 0..m.rows() {
            rows.push(m.row(i).to_vec());
        }
    }
    Matrix::from_rows(&rows).map_err(CacheError::from)
}

fn check_head_shapes(
    layout: &SequenceLayout,
    head: usize,
    data: &HeadData,
) -> Result<(), CacheError> {
    let d = layout.d;
    let checks = [
        (
            "visual_keys",
            data.visual_keys.rows(),
            data.visual_keys.cols(),
            layout.n_visual,
            d,
        ),
        (
            "visual_values",
            data.visual_values.rows(),
            data.visual_values.cols(),
            layout.n_visual,
            d,
        ),
        (
            "text_keys",
            data.text_keys.rows(),
            data.text_keys.cols(),
            layout.n_text,
            d,
        ),
        (
            "text_values",
            data.text_values.rows(),
            data.text_values.cols(),
            layout.n_text,
            d,
        ),
    ];
    for (name, rows, cols, want_rows, want_cols) in checks {
        if rows != want_rows || cols != want_cols {
            return Err(CacheError::Shape {
                what: format!(
                    "kv head {head} {name} is {rows}x{cols}, expected {want_rows}x{want_cols}"
                ),
            });
        }
    }
    Ok(())
}

/// Runs the prefill pipeline: mask visual tokens, build one rotation per kv
/// head (pooling the query windows of the head's group), rotate-truncate the
/// surviving keys, and store everything in single precision.
pub fn prefill_compress(
    input: &PrefillInput,
    token_mask: &[bool],
    cfg: &SubspaceConfig,
    layout: &SequenceLayout,
) -> Result<CompressedCache, CacheError> {
    layout.validate()?;
    if input.heads.len() != layout.heads_kv {
        return Err(CacheError::Shape {
            what: format!(
                "{} kv head tensors for heads_kv={}",
                input.heads.len(),
                layout.heads_kv
            ),
        });
    }
    if input.query_windows.len() != layout.heads_q {
        return Err(CacheError::Shape {
            what: format!(
                "{} query windows for heads_q={}",
                input.query_windows.len(),
                layout.heads_q
            ),
        });
    }
    if token_mask.len() != layout.n_visual {
        return Err(CacheError::MaskLength {
            mask_len: token_mask.len(),
            expected: layout.n_visual,
        });
    }
    let n_kept = token_mask.iter().filter(|&&b| b).count();
    if n_kept == 0 {
        return Err(CacheError::EmptyVisual);
    }

    let group = layout.group_size();
    let mut heads = Vec::with_capacity(layout.heads_kv);
    for (h_kv, data) in input.heads.iter().enumerate() {
        check_head_shapes(layout, h_kv, data)?;
        let kept_keys = keep_rows(&data.visual_keys, token_mask);
        let kept_values = keep_rows(&data.visual_values, token_mask);

        let windows: Vec<&Matrix> = input.query_windows[h_kv * group..(h_kv + 1) * group]
            .iter()
            .collect();
        let pooled = concat_rows(&windows)?;

        let head_cfg = cfg.for_head(0, h_kv);
        let rotation = build_rotation_state(&kept_keys, &pooled, &head_cfg)?;
        let rotated = matmul(&kept_keys, &rotation.basis)?;

        heads.push(HeadCache {
            visual_keys_rot: rotated.to_f32(),
            visual_values: kept_values.to_f32(),
            text_keys: data.text_keys.to_f32(),
            text_values: data.text_values.to_f32(),
            rotation,
        });
    }

    Ok(CompressedCache {
        layout: SequenceLayout {
            n_visual: n_kept,
            ..*layout
        },
        requested_rank: cfg.rank_k,
        heads,
    })
}

/// KV-cache budget accounting as reported alongside experiments: keys are
/// channel-pruned, values keep the full width, hence `(1 + c)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub token_keep: f64,
    pub channel_keep: f64,
    /// `token_keep × (1 + channel_keep) / 2`, full precision.
    pub visual_cache_multiplier: f64,
}

impl BudgetReport {
    /// Multiplier rounded half-up to two decimals, for display only.
    pub fn display_multiplier(&self) -> f64 {
        (self.visual_cache_multiplier * 100.0).round() / 100.0
    }
}

fn check_ratio(name: &'static str, value: f64) -> Result<(), CacheError> {
    if !(value > 0.0 && value <= 1.0) {
        return Err(CacheError::BadRatio { name, value });
    }
    Ok(())
}

/// Computes the visual KV-cache multiplier for a joint token/channel budget.
pub fn budget(token_keep: f64, channel_keep: f64) -> Result<BudgetReport, CacheError> {
    check_ratio("token_keep", token_keep)?;
    check_ratio("channel_keep", channel_keep)?;
    Ok(BudgetReport {
        token_keep,
        channel_keep,
        visual_cache_multiplier: token_keep * (1.0 + channel_keep) / 2.0,
    })
}

/// Exact per-segment byte counts of one cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBytes {
    pub visual_keys: u64,
    pub visual_values: u64,
    pub text_keys: u64,
    pub text_values: u64,
    /// Rotation state overhead (f64 basis, mean, and residual), reported
    /// separately from the KV tensors.
    pub rotation_state: u64,
}

impl CacheBytes {
    pub fn visual_total(&self) -> u64 {
        self.visual_keys + self.visual_values
    }

    pub fn kv_total(&self) -> u64 {
        self.visual_total() + self.text_keys + self.text_values
    }
}

const F32_BYTES: u64 = 4;
const F64_BYTES: u64 = 8;

/// Counts cached elements per segment: visual keys at k channels, everything
/// else at the full dimension d.
pub fn cache_bytes(cache: &CompressedCache) -> CacheBytes {
    let mut out = CacheBytes {
        visual_keys: 0,
        visual_values: 0,
        text_keys: 0,
        text_values: 0,
        rotation_state: 0,
    };
    for head in &cache.heads {
        let n = head.visual_keys_rot.rows() as u64;
        let k = head.visual_keys_rot.cols() as u64;
        let d = head.visual_values.cols() as u64;
        let s = head.text_keys.rows() as u64;
        out.visual_keys += n * k * F32_BYTES;
        out.visual_values += n * d * F32_BYTES;
        out.text_keys += s * d * F32_BYTES;
        out.text_values += s * d * F32_BYTES;
        out.rotation_state += (d * k + 2 * d) * F64_BYTES;
    }
    out
}
