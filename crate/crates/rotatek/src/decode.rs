//! Decode-step attention over the compressed cache.
//!
//! One step serves two score paths against a single query: sparse-channel
//! scores over the rotated visual keys (rotated query plus a scalar
//! mean-correction bias, all inside the `1/√d` scaling) and full-channel
//! scores over the prompt/text keys, joined in one softmax over the
//! concatenated tokens. The split-K path partitions the visual tokens into
//! contiguous blocks, accumulates an `(m, ℓ, acc)` partial per split, and
//! folds the partials into the full-channel phase with the standard
//! online-softmax merge, mirroring the two-kernel decomposition of the
//! fused decoder at reference level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::CompressedCache;
use crate::linalg::dot;
use crate::rotation::basis_project;

/// Division guard for the single-precision finalize; the double-precision
/// reference uses exactly zero so normalization bugs cannot hide behind it.
pub const EPS_DIV_F64: f64 = 0.0;
pub const EPS_DIV_F32: f32 = 1e-20;

pub const DEFAULT_BLOCK_N: usize = 64;
pub const DEFAULT_MAX_SPLITS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("query head {head} out of range for {heads_q} heads")]
    HeadOutOfRange { head: usize, heads_q: usize },
    #[error("query length {got} does not match head dimension {expected}")]
    QueryLength { got: usize, expected: usize },
    #[error("cache holds no tokens")]
    EmptyCache,
    #[error("{got} queries for {expected} query heads")]
    HeadCountMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodePath {
    Monolithic,
    SplitK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(default = "default_block_n")]
    pub block_n: usize,
    #[serde(default = "default_max_splits")]
    pub max_splits: usize,
    #[serde(default = "default_path")]
    pub path: DecodePath,
}

fn default_block_n() -> usize {
    DEFAULT_BLOCK_N
}
fn default_max_splits() -> usize {
    DEFAULT_MAX_SPLITS
}
fn default_path() -> DecodePath {
    DecodePath::Monolithic
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            block_n: DEFAULT_BLOCK_N,
            max_splits: DEFAULT_MAX_SPLITS,
            path: DecodePath::Monolithic,
        }
    }
}

/// Split-K factor over vision tokens: `max(1, min(⌈S_v/BLOCK_N⌉, max_splits))`.
pub fn split_factor(s_v: usize, cfg: &DecodeConfig) -> usize {
    let blocks = s_v.div_ceil(cfg.block_n.max(1));
    blocks.clamp(1, cfg.max_splits.max(1))
}

/// Contiguous token ranges for each of the `split_factor` splits. Each split
/// covers whole blocks of `block_n`; trailing splits may be empty when the
/// block count is not divisible, which the merge absorbs through the empty
/// sentinel.
fn split_ranges(s_v: usize, cfg: &DecodeConfig) -> Vec<std::ops::Range<usize>> {
    let ns = split_factor(s_v, cfg);
    let per_split = s_v.div_ceil(ns);
    let chunk = per_split.div_ceil(cfg.block_n.max(1)) * cfg.block_n.max(1);
    (0..ns)
        .map(|i| {
            let start = (i * chunk).min(s_v);
            let end = ((i + 1) * chunk).min(s_v);
            start..end
        })
        .collect()
}

/// Online-softmax bookkeeping: running max, running denominator, and the
/// value-weighted accumulator. The empty state carries the most-negative
/// finite score plus an explicit emptiness flag so `exp(m − m')` never sees
/// a NaN-producing operand.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPartial {
    pub m: f64,
    pub l: f64,
    pub acc: Vec<f64>,
    empty: bool,
}

impl SoftmaxPartial {
    pub fn empty(d: usize) -> Self {
        Self {
            m: f64::MIN,
            l: 0.0,
            acc: vec![0.0; d],
            empty: true,
        }
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.empty
    }

    /// Folds one `(score, value-row)` pair into the running state.
    pub fn accumulate(&mut self, score: f64, value: impl Iterator<Item = f64>) {
        if self.empty {
            self.m = score;
            self.l = 1.0;
            for (a, v) in self.acc.iter_mut().zip(value) {
                *a = v;
            }
            self.empty = false;
        } else if score <= self.m {
            let w = (score - self.m).exp();
            self.l += w;
            for (a, v) in self.acc.iter_mut().zip(value) {
                *a += w * v;
            }
        } else {
            let scale = (self.m - score).exp();
            self.l = self.l * scale + 1.0;
            for (a, v) in self.acc.iter_mut().zip(value) {
                *a = *a * scale + v;
            }
            self.m = score;
        }
    }

    /// Associative, order-insensitive merge of two partials.
    pub fn merge(&self, other: &SoftmaxPartial) -> SoftmaxPartial {
        if self.empty {
            return other.clone();
        }
        if other.empty {
            return self.clone();
        }
        let m = self.m.max(other.m);
        let wa = (self.m - m).exp();
        let wb = (other.m - m).exp();
        let l = self.l * wa + other.l * wb;
        let acc = self
            .acc
            .iter()
            .zip(&other.acc)
            .map(|(a, b)| a * wa + b * wb)
            .collect();
        SoftmaxPartial {
            m,
            l,
            acc,
            empty: false,
        }
    }

    /// `acc / (ℓ + ε)`.
    pub fn finalize(&self, eps_div: f64) -> Vec<f64> {
        self.acc.iter().map(|a| a / (self.l + eps_div)).collect()
    }
}

/// Merges a non-empty list of partials. Empty-sentinel entries are
/// absorbing-neutral, so a merge over any permutation of the same partials
/// gives the same state.
pub fn merge_partials(parts: &[SoftmaxPartial]) -> SoftmaxPartial {
    assert!(
        !parts.is_empty(),
        "merge_partials requires at least one partial"
    );
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = acc.merge(p);
    }
    acc
}

struct HeadView<'a> {
    cache: &'a CompressedCache,
    h_kv: usize,
}

fn head_view<'a>(
    q_len: usize,
    cache: &'a CompressedCache,
    head: usize,
) -> Result<HeadView<'a>, DecodeError> {
    let layout = &cache.layout;
    if head >= layout.heads_q {
        return Err(DecodeError::HeadOutOfRange {
            head,
            heads_q: layout.heads_q,
        });
    }
    if q_len != layout.d {
        return Err(DecodeError::QueryLength {
            got: q_len,
            expected: layout.d,
        });
    }
    Ok(HeadView {
        cache,
        h_kv: layout.kv_head_for(head),
    })
}

/// Attention scores for one query against the compressed cache, visual
/// segment first: `(q̃ K̃ᵀ + b_t)/√d` over visual tokens, `q K_ptᵀ/√d` over
/// prompt/text tokens. The divisor is `√d` on both segments regardless of
/// the truncated rank.
pub fn decode_scores(
    q: &[f64],
    cache: &CompressedCache,
    head: usize,
) -> Result<Vec<f64>, DecodeError> {
    let view = head_view(q.len(), cache, head)?;
    let hc = &cache.heads[view.h_kv];
    let scale = 1.0 / (cache.layout.d as f64).sqrt();

    let q_rot = basis_project(&hc.rotation.basis, q);
    let bias = dot(q, &hc.rotation.mean_residual);

    let n = hc.visual_keys_rot.rows();
    let s_full = hc.text_keys.rows();
    let mut scores = Vec::with_capacity(n + s_full);
    for i in 0..n {
        let row = hc.visual_keys_rot.row(i);
        let mut s = bias;
        for (qr, &kv) in q_rot.iter().zip(row) {
            s += qr * f64::from(kv);
        }
        scores.push(s * scale);
    }
    for i in 0..s_full {
        let row = hc.text_keys.row(i);
        let mut s = 0.0;
        for (qi, &kv) in q.iter().zip(row) {
            s += qi * f64::from(kv);
        }
        scores.push(s * scale);
    }
    Ok(scores)
}

fn monolithic_output(scores: &[f64], view: &HeadView) -> Vec<f64> {
    let hc = &view.cache.heads[view.h_kv];
    let d = view.cache.layout.d;
    let n = hc.visual_keys_rot.rows();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0f64;
    let mut out = vec![0.0f64; d];
    for (idx, &s) in scores.iter().enumerate() {
        let w = (s - m).exp();
        denom += w;
        let row = if idx < n {
            hc.visual_values.row(idx)
        } else {
            hc.text_values.row(idx - n)
        };
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * f64::from(v);
        }
    }
    for o in &mut out {
        *o /= denom + EPS_DIV_F64;
    }
    out
}

fn split_k_output(scores: &[f64], view: &HeadView, cfg: &DecodeConfig) -> Vec<f64> {
    let hc = &view.cache.heads[view.h_kv];
    let d = view.cache.layout.d;
    let n = hc.visual_keys_rot.rows();

    // Phase 1: one sparse partial per split over the visual tokens.
    let sparse: Vec<SoftmaxPartial> = split_ranges(n, cfg)
        .into_iter()
        .map(|range| {
            let mut p = SoftmaxPartial::empty(d);
            for i in range {
                p.accumulate(
                    scores[i],
                    hc.visual_values.row(i).iter().map(|&v| f64::from(v)),
                );
            }
            p
        })
        .collect();

    // Phase 2: full-channel pass over prompt/text tokens, then fold in the
    // sparse partials.
    let mut full = SoftmaxPartial::empty(d);
    for i in 0..hc.text_keys.rows() {
        full.accumulate(
            scores[n + i],
            hc.text_values.row(i).iter().map(|&v| f64::from(v)),
        );
    }
    let merged = sparse.iter().fold(full, |acc, p| acc.merge(p));
    merged.finalize(EPS_DIV_F64)
}

/// Softmax-weighted sum of full-channel values over the concatenated scores,
/// via the path selected in `cfg`. Both paths produce the same output up to
/// accumulation-order roundoff.
pub fn attention_output(
    q: &[f64],
    cache: &CompressedCache,
    head: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<f64>, DecodeError> {
    let view = head_view(q.len(), cache, head)?;
    let hc = &cache.heads[view.h_kv];
    if hc.visual_keys_rot.rows() + hc.text_keys.rows() == 0 {
        return Err(DecodeError::EmptyCache);
    }
    let scores = decode_scores(q, cache, head)?;
    Ok(match cfg.path {
        DecodePath::Monolithic => monolithic_output(&scores, &view),
        DecodePath::SplitK => split_k_output(&scores, &view, cfg),
    })
}

/// One decode step across all query heads. Head `h` reads kv head
/// `⌊h / (H_q/H_kv)⌋`; results are identical to per-head calls.
pub fn decode_batch(
    queries: &[Vec<f64>],
    cache: &CompressedCache,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<f64>>, DecodeError> {
    if queries.len() != cache.layout.heads_q {
        return Err(DecodeError::HeadCountMismatch {
            got: queries.len(),
            expected: cache.layout.heads_q,
        });
    }
    queries
        .iter()
        .enumerate()
        .map(|(head, q)| attention_output(q, cache, head, cfg))
        .collect()
}

// ---------------------------------------------------------------------------
// Single-precision path, emulating the kernel's f32 arithmetic end to end.

/// `(m, ℓ, acc)` partial in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPartialF32 {
    pub m: f32,
    pub l: f32,
    pub acc: Vec<f32>,
    empty: bool,
}

impl SoftmaxPartialF32 {
    pub fn empty(d: usize) -> Self {
        Self {
            m: f32::MIN,
            l: 0.0,
            acc: vec![0.0; d],
            empty: true,
        }
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn accumulate(&mut self, score: f32, value: impl Iterator<Item = f32>) {
        if self.empty {
            self.m = score;
            self.l = 1.0;
            for (a, v) in self.acc.iter_mut().zip(value) {
                *a = v;
            }
            self.empty = false;
        } else if score <= self.m {
            let w = (score - self.m).exp();
            self.l += w;
            for (a, v) in self.acc.iter_mut().zip(value) {
                *a += w * v;
            }
        } else {
            let scale = (self.m - score).exp();
            self.l = self.l * scale + 1.0;
            for (a, v) in self.acc.iter_mut().zip(value) {
                *a = *a * scale + v;
            }
            self.m = score;
        }
    }

    pub fn merge(&self, other: &SoftmaxPartialF32) -> SoftmaxPartialF32 {
        if self.empty {
            return other.clone();
        }
        if other.empty {
            return self.clone();
        }
        let m = self.m.max(other.m);
        let wa = (self.m - m).exp();
        let wb = (other.m - m).exp();
        let l = self.l * wa + other.l * wb;
        let acc = self
            .acc
            .iter()
            .zip(&other.acc)
            .map(|(a, b)| a * wa + b * wb)
            .collect();
        SoftmaxPartialF32 {
            m,
            l,
            acc,
            empty: false,
        }
    }

    pub fn finalize(&self, eps_div: f32) -> Vec<f32> {
        self.acc.iter().map(|a| a / (self.l + eps_div)).collect()
    }
}

/// Single-precision scores: the query rotation, bias, and dot products all
/// run in f32.
pub fn decode_scores_f32(
    q: &[f32],
    cache: &CompressedCache,
    head: usize,
) -> Result<Vec<f32>, DecodeError> {
    let view = head_view(q.len(), cache, head)?;
    let hc = &cache.heads[view.h_kv];
    let d = cache.layout.d;
    let scale = 1.0 / (d as f32).sqrt();
    let basis = &hc.rotation.basis;
    let k = hc.rotation.rank_k;

    let mut q_rot = vec![0.0f32; k];
    for (i, &qi) in q.iter().enumerate() {
        for (j, qr) in q_rot.iter_mut().enumerate() {
            *qr += qi * basis.get(i, j) as f32;
        }
    }
    let mut bias = 0.0f32;
    for (&qi, &dm) in q.iter().zip(&hc.rotation.mean_residual) {
        bias += qi * dm as f32;
    }

    let n = hc.visual_keys_rot.rows();
    let mut scores = Vec::with_capacity(n + hc.text_keys.rows());
    for i in 0..n {
        let mut s = bias;
        for (qr, &kv) in q_rot.iter().zip(hc.visual_keys_rot.row(i)) {
            s += qr * kv;
        }
        scores.push(s * scale);
    }
    for i in 0..hc.text_keys.rows() {
        let mut s = 0.0f32;
        for (qi, &kv) in q.iter().zip(hc.text_keys.row(i)) {
            s += qi * kv;
        }
        scores.push(s * scale);
    }
    Ok(scores)
}

/// Single-precision attention output via either path, with the `1e-20`
/// division guard at finalize.
pub fn attention_output_f32(
    q: &[f32],
    cache: &CompressedCache,
    head: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<f32>, DecodeError> {
    let view = head_view(q.len(), cache, head)?;
    let hc = &cache.heads[view.h_kv];
    let d = cache.layout.d;
    let n = hc.visual_keys_rot.rows();
    if n + hc.text_keys.rows() == 0 {
        return Err(DecodeError::EmptyCache);
    }
    let scores = decode_scores_f32(q, cache, head)?;

    let partials: Vec<SoftmaxPartialF32> = match cfg.path {
        DecodePath::Monolithic => {
            let mut p = SoftmaxPartialF32::empty(d);
            for (idx, &s) in scores.iter().enumerate() {
                let row = if idx < n {
                    hc.visual_values.row(idx)
                } else {
                    hc.text_values.row(idx - n)
                };
                p.accumulate(s, row.iter().copied());
            }
            vec![p]
        }
        DecodePath::SplitK => {
            let mut parts: Vec<SoftmaxPartialF32> = split_ranges(n, cfg)
                .into_iter()
                .map(|range| {
                    let mut p = SoftmaxPartialF32::empty(d);
                    for i in range {
                        p.accumulate(scores[i], hc.visual_values.row(i).iter().copied());
                    }
                    p
                })
                .collect();
            let mut full = SoftmaxPartialF32::empty(d);
            for i in 0..hc.text_keys.rows() {
                full.accumulate(scores[n + i], hc.text_values.row(i).iter().copied());
            }
            parts.insert(0, full);
            parts
        }
    };
    let merged = partials
        .iter()
        .skip(1)
        .fold(partials[0].clone(), |acc, p| acc.merge(p));
    Ok(merged.finalize(EPS_DIV_F32))
}
