//! Synthetic activation generator.
//!
//! Keys carry three planted ingredients on disjoint channel slots, modeling
//! the structure that makes fixed channel subsets a poor fit: channel pairs
//! rotated by a position-dependent angle (so per-channel magnitude
//! oscillates with token index), a few high-gain outlier channels, and a
//! shared low-rank component mixed across the remaining channels by a random
//! orthonormal basis. Queries draw from the same planted subspace under a
//! reweighted spectrum, which makes query-aware channel weighting
//! distinguishable from the key-only variant.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::{HeadData, PrefillInput, SequenceLayout};
use crate::harness::config::ConfigError;
use crate::linalg::Matrix;
use crate::rotation::derive_seed;

/// Query rows produced per head: one σ-estimation window plus one held-out
/// probe window of the default size.
pub const DEFAULT_QUERY_ROWS: usize = 2 * crate::rotation::DEFAULT_QUERY_WINDOW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_tokens: usize,
    pub d: usize,
    /// Shared low-rank directions mixed across the non-planted channels.
    pub planted_rank: usize,
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    /// Channel pairs rotated by position-dependent angles.
    pub rope_pairs: usize,
    /// Base of the geometric frequency ladder across pairs.
    pub rope_base_frequency: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Defaults shaped to a layout: a handful of pairs and outliers plus a
    /// low-rank component, with mild noise. The outlier gain keeps those
    /// channels clearly dominant while activations stay near unit scale, so
    /// single-precision cache rounding stays well inside the lossless-path
    /// tolerance.
    pub fn for_shape(n_tokens: usize, d: usize, seed: u64) -> Self {
        let rope_pairs = (d / 16).clamp(1, 4);
        let outlier_channels = (d / 32).clamp(1, 2);
        let planted_rank = (d / 8).clamp(1, 8);
        Self {
            n_tokens,
            d,
            planted_rank,
            outlier_channels,
            outlier_gain: 8.0,
            rope_pairs,
            rope_base_frequency: 10_000.0,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.n_tokens == 0 {
            return Err(ConfigError::Invalid {
                reason: "n_tokens and d must be >= 1".into(),
            });
        }
        let used = self.planted_rank + 2 * self.rope_pairs + self.outlier_channels;
        if used > self.d {
            return Err(ConfigError::Invalid {
                reason: format!(
                    "planted_rank + 2*rope_pairs + outlier_channels = {used} exceeds d = {}",
                    self.d
                ),
            });
        }
        if self.rope_base_frequency <= 0.0 || !self.rope_base_frequency.is_finite() {
            return Err(ConfigError::Invalid {
                reason: "rope_base_frequency must be > 0".into(),
            });
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(ConfigError::Invalid {
                reason: "noise_sigma must be >= 0".into(),
            });
        }
        if self.outlier_gain < 0.0 || !self.outlier_gain.is_finite() {
            return Err(ConfigError::Invalid {
                reason: "outlier_gain must be >= 0".into(),
            });
        }
        Ok(())
    }
}

const SALT_STRUCTURE: u64 = 0x5359_4e01;
const SALT_KEYS: u64 = 0x5359_4e02;
const SALT_QUERIES: u64 = 0x5359_4e03;
const SALT_VALUES: u64 = 0x5359_4e04;
const SALT_TEXT: u64 = 0x5359_4e05;
const SALT_HEAD: u64 = 0x5359_4e06;
const SALT_QHEAD: u64 = 0x5359_4e07;

/// Frozen planted structure for one head. Channel slots: pairs occupy
/// `[0, 2p)`, outliers `[2p, 2p+o)`, and the low-rank component mixes over
/// the remaining channels.
struct PlantedHead {
    spec: SyntheticSpec,
    pair_freqs: Vec<f64>,
    pair_amps: Vec<f64>,
    /// Orthonormal columns, rest_width × r.
    mixing: Matrix,
    /// Key latent scales per low-rank direction (decaying spectrum).
    key_scales: Vec<f64>,
    /// Query latent scales: a seeded reweighting of the same directions.
    query_scales: Vec<f64>,
}

impl PlantedHead {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SALT_STRUCTURE));
        let p = spec.rope_pairs;
        let r = spec.planted_rank;
        let rest = spec.d - 2 * p - spec.outlier_channels;

        let pair_freqs: Vec<f64> = (0..p)
            .map(|i| spec.rope_base_frequency.powf(-(i as f64) / p.max(1) as f64))
            .collect();
        let pair_amps: Vec<f64> = (0..p).map(|i| 1.0 + 0.25 * i as f64).collect();

        // Random orthonormal mixing for the low-rank component.
        let mut mixing = Matrix::zeros(rest, r);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
        while cols.len() < r {
            let mut u: Vec<f64> = (0..rest).map(|_| StandardNormal.sample(&mut rng)).collect();
            for _ in 0..2 {
                for q in &cols {
                    let proj = crate::linalg::dot(&u, q);
                    for (ui, qi) in u.iter_mut().zip(q) {
                        *ui -= proj * qi;
                    }
                }
            }
            let norm = crate::linalg::norm2(&u);
            if norm > 1e-8 {
                for ui in &mut u {
                    *ui /= norm;
                }
                cols.push(u);
            }
        }
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                mixing.set(i, j, x);
            }
        }

        let key_scales: Vec<f64> = (0..r).map(|j| 2.0 * 0.8f64.powi(j as i32)).collect();
        let query_scales: Vec<f64> = (0..r)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g.abs() + 0.25
            })
            .collect();

        Self {
            spec: spec.clone(),
            pair_freqs,
            pair_amps,
            mixing,
            key_scales,
            query_scales,
        }
    }

    /// One activation row at absolute position `pos`.
    fn sample_row(
        &self,
        pos: usize,
        latent_scales: &[f64],
        pair_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let s = &self.spec;
        let mut row = vec![0.0f64; s.d];
        for (i, (&freq, &amp)) in self.pair_freqs.iter().zip(&self.pair_amps).enumerate() {
            let angle = pos as f64 * freq;
            row[2 * i] = pair_gain * amp * angle.cos();
            row[2 * i + 1] = pair_gain * amp * angle.sin();
        }
        let outlier_base = 2 * s.rope_pairs;
        for j in 0..s.outlier_channels {
            let g: f64 = StandardNormal.sample(rng);
            row[outlier_base + j] = s.outlier_gain * g;
        }
        let rest_base = outlier_base + s.outlier_channels;
        if s.planted_rank > 0 {
            let latent: Vec<f64> = latent_scales
                .iter()
                .map(|&sc| {
                    let g: f64 = StandardNormal.sample(rng);
                    sc * g
                })
                .collect();
            let mixed = crate::linalg::matvec(&self.mixing, &latent);
            for (slot, v) in row[rest_base..].iter_mut().zip(mixed) {
                *slot = v;
            }
        }
        if s.noise_sigma > 0.0 {
            for v in &mut row {
                let g: f64 = StandardNormal.sample(rng);
                *v += s.noise_sigma * g;
            }
        }
        row
    }

    fn sample_keys(&self, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|pos| self.sample_row(pos, &self.key_scales.clone(), 1.0, &mut rng))
            .collect();
        Matrix::from_rows(&rows).expect("generated rows are rectangular")
    }

    /// Queries continue the position axis after the keys and reweight the
    /// planted directions.
    fn sample_queries(&self, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = self.spec.n_tokens;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|t| self.sample_row(start + t, &self.query_scales.clone(), 0.8, &mut rng))
            .collect();
        Matrix::from_rows(&rows).expect("generated rows are rectangular")
    }

    fn sample_gaussian(&self, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, self.spec.d);
        for i in 0..n {
            for j in 0..self.spec.d {
                let g: f64 = StandardNormal.sample(&mut rng);
                m.set(i, j, g);
            }
        }
        m
    }
}

/// Generates one head's `(keys, queries, values)`: `n_tokens`×d keys,
/// [`DEFAULT_QUERY_ROWS`]×d queries, `n_tokens`×d values. Deterministic per
/// seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Matrix, Matrix, Matrix), ConfigError> {
    spec.validate()?;
    let head = PlantedHead::new(spec);
    let keys = head.sample_keys(spec.n_tokens, derive_seed(spec.seed, SALT_KEYS));
    let queries = head.sample_queries(DEFAULT_QUERY_ROWS, derive_seed(spec.seed, SALT_QUERIES));
    let values = head.sample_gaussian(spec.n_tokens, derive_seed(spec.seed, SALT_VALUES));
    Ok((keys, queries, values))
}

/// Full multi-head prefill input plus per-query-head probe queries. Every kv
/// head gets its own planted structure; the query heads in a group share it
/// but draw independent query streams of `2 × window` rows (the trailing
/// `window` rows are the held-out probes).
pub fn gen_head_inputs(
    spec: &SyntheticSpec,
    layout: &SequenceLayout,
    window: usize,
) -> Result<(PrefillInput, Vec<Matrix>), ConfigError> {
    spec.validate()?;
    if spec.n_tokens != layout.n_visual || spec.d != layout.d {
        return Err(ConfigError::Invalid {
            reason: "synthetic spec shape disagrees with layout".into(),
        });
    }
    let group = layout.heads_q / layout.heads_kv;
    let mut heads = Vec::with_capacity(layout.heads_kv);
    let mut sigma_windows = Vec::with_capacity(layout.heads_q);
    let mut probes = Vec::with_capacity(layout.heads_q);
    for h_kv in 0..layout.heads_kv {
        let head_seed = derive_seed(spec.seed, derive_seed(SALT_HEAD, h_kv as u64));
        let head_spec = SyntheticSpec {
            seed: head_seed,
            ..spec.clone()
        };
        let planted = PlantedHead::new(&head_spec);
        let visual_keys = planted.sample_keys(spec.n_tokens, derive_seed(head_seed, SALT_KEYS));
        let visual_values =
            planted.sample_gaussian(spec.n_tokens, derive_seed(head_seed, SALT_VALUES));
        let text_keys = planted.sample_gaussian(layout.n_text, derive_seed(head_seed, SALT_TEXT));
        let text_values =
            planted.sample_gaussian(layout.n_text, derive_seed(head_seed, SALT_TEXT + 1));
        heads.push(HeadData {
            visual_keys,
            visual_values,
            text_keys,
            text_values,
        });

        for g in 0..group {
            let q_head = h_kv * group + g;
            let q_seed = derive_seed(head_seed, derive_seed(SALT_QHEAD, q_head as u64));
            let stream = planted.sample_queries(2 * window, q_seed);
            let (sigma_w, probe_w, _) = split_probe_window(&stream, window);
            sigma_windows.push(sigma_w);
            probes.push(probe_w);
        }
    }
    Ok((
        PrefillInput {
            heads,
            query_windows: sigma_windows,
        },
        probes,
    ))
}

/// Splits a query stream into the σ-estimation window and a held-out probe
/// window. When fewer than `2·window` rows exist the same trailing rows
/// serve both roles and the flag reports the overlap.
pub fn split_probe_window(queries: &Matrix, window: usize) -> (Matrix, Matrix, bool) {
    let rows = queries.rows();
    let take = |from: usize, to: usize| {
        let slice: Vec<Vec<f64>> = (from..to).map(|i| queries.row(i).to_vec()).collect();
        Matrix::from_rows(&slice).expect("row slices are rectangular")
    };
    if rows >= 2 * window {
        (
            take(rows - 2 * window, rows - window),
            take(rows - window, rows),
            false,
        )
    } else {
        let w = window.min(rows);
        let tail = take(rows - w, rows);
        (tail.clone(), tail, true)
    }
}

/// Deterministic token mask keeping `max(1, round(keep_ratio · n))` tokens,
/// selected uniformly at random from the given seed.
pub fn random_token_mask(n: usize, keep_ratio: f64, seed: u64) -> Vec<bool> {
    let keep = ((keep_ratio * n as f64).round() as usize).clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first `keep` slots are the kept tokens.
    for i in 0..keep.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut mask = vec![false; n];
    for &i in &idx[..keep.min(n)] {
        mask[i] = true;
    }
    mask
}
