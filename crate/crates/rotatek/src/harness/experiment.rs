//! Experiment orchestration.
//!
//! One experiment prepares a data bundle (synthetic or trace-loaded), then
//! evaluates a grid of cells: each cell is a (solver mode, weighting,
//! channel-keep) combination. Cells are pure functions of the shared
//! read-only data and their own spec, so the runner may evaluate them on any
//! number of worker threads; results are keyed by cell index and assembled
//! in order, which keeps reports identical across thread counts.

use std::time::Instant;

use rayon::prelude::*;

use crate::baselines::{headwise_reconstruct, headwise_select, tokenwise_select};
use crate::cache::{budget, cache_bytes, prefill_compress, CompressedCache, PrefillInput};
use crate::error::Error;
use crate::harness::config::{DataSource, ExperimentConfig};
use crate::harness::report::{
    mean_summary, BaselineCell, BaselineStats, CellReport, ExperimentReport, HeadReport, Timings,
    REPORT_SCHEMA_VERSION,
};
use crate::harness::synthetic::{gen_head_inputs, random_token_mask, split_probe_window};
use crate::harness::trace::{trace_read, trace_to_prefill};
use crate::linalg::Matrix;
use crate::metrics::{score_stats, summarize};
use crate::rotation::{
    covariance_pair, derive_seed, query_channel_norms, QueryWeights, SolverMode, SubspaceConfig,
    Weighting,
};

const SALT_TOKEN_MASK: u64 = 0x4d41_534b;

/// One grid cell: solver/weighting variant at a channel-keep ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub mode: SolverMode,
    pub weighting: Weighting,
    pub channel_keep: f64,
}

/// The three-variant ablation grid crossed with the given keep ratios:
/// the iterative solver and the full eigendecomposition under query-aware
/// weighting, plus the iterative solver without query weighting.
pub fn ablation_grid(channel_keeps: &[f64]) -> Vec<CellSpec> {
    let variants = [
        (SolverMode::CholeskyIteration, Weighting::QueryAware),
        (SolverMode::FullEigh, Weighting::QueryAware),
        (SolverMode::CholeskyIteration, Weighting::QueryAgnostic),
    ];
    let mut cells = Vec::with_capacity(variants.len() * channel_keeps.len());
    for &(mode, weighting) in &variants {
        for &channel_keep in channel_keeps {
            cells.push(CellSpec {
                mode,
                weighting,
                channel_keep,
            });
        }
    }
    cells
}

/// Read-only data bundle shared by every cell.
pub struct ExperimentData {
    pub input: PrefillInput,
    /// Held-out probe queries per query head.
    pub probes: Vec<Matrix>,
    pub token_mask: Vec<bool>,
    pub probe_overlap: bool,
}

/// Prepares activations and the token mask for one config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData, Error> {
    cfg.validate()?;
    match &cfg.data_source {
        DataSource::Synthetic => {
            let spec = cfg.synthetic_spec();
            let (input, probes) = gen_head_inputs(&spec, &cfg.layout, cfg.query_window)?;
            let token_mask = random_token_mask(
                cfg.layout.n_visual,
                cfg.token_keep,
                derive_seed(spec.seed, SALT_TOKEN_MASK),
            );
            Ok(ExperimentData {
                input,
                probes,
                token_mask,
                probe_overlap: false,
            })
        }
        DataSource::Trace(path) => {
            let trace = trace_read(path)?;
            if trace.layout != cfg.layout {
                return Err(Error::Config(
                    crate::harness::config::ConfigError::Invalid {
                        reason: format!(
                            "trace layout {:?} disagrees with config layout {:?}",
                            trace.layout, cfg.layout
                        ),
                    },
                ));
            }
            let (mut input, mask) = trace_to_prefill(&trace)?;
            let mut probes = Vec::with_capacity(input.query_windows.len());
            let mut overlap = false;
            for window in &mut input.query_windows {
                let (sigma_w, probe_w, o) = split_probe_window(window, cfg.query_window);
                overlap |= o;
                *window = sigma_w;
                probes.push(probe_w);
            }
            let token_mask = mask.unwrap_or_else(|| {
                random_token_mask(
                    cfg.layout.n_visual,
                    cfg.token_keep,
                    derive_seed(cfg.subspace.seed, SALT_TOKEN_MASK),
                )
            });
            Ok(ExperimentData {
                input,
                probes,
                token_mask,
                probe_overlap: overlap,
            })
        }
    }
}

fn keep_rows(m: &Matrix, mask: &[bool]) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..m.rows())
        .filter(|&i| mask[i])
        .map(|i| m.row(i).to_vec())
        .collect();
    if rows.is_empty() {
        Matrix::zeros(0, m.cols())
    } else {
        Matrix::from_rows(&rows).expect("mask keeps column count")
    }
}

fn concat_rows(mats: &[&Matrix]) -> Matrix {
    let mut rows = Vec::new();
    for m in mats {
        for i in 0..m.rows() {
            rows.push(m.row(i).to_vec());
        }
    }
    Matrix::from_rows(&rows).expect("windows share the column count")
}

fn rank_for(channel_keep: f64, d: usize) -> usize {
    ((channel_keep * d as f64).round() as usize).clamp(1, d)
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    index: usize,
    cell: &CellSpec,
) -> Result<CellReport, Error> {
    let layout = &cfg.layout;
    let d = layout.d;
    let rank_k = rank_for(cell.channel_keep, d);
    let sub_cfg = SubspaceConfig {
        rank_k,
        mode: cell.mode,
        weighting: cell.weighting,
        ..cfg.subspace.clone()
    };
    let cache: CompressedCache = prefill_compress(&data.input, &data.token_mask, &sub_cfg, layout)?;

    let group = layout.group_size();
    let mut heads = Vec::with_capacity(layout.heads_kv);
    let mut hw_acc: Vec<BaselineStats> = Vec::new();
    let mut tw_acc: Vec<BaselineStats> = Vec::new();

    for h_kv in 0..layout.heads_kv {
        let head_data = &data.input.heads[h_kv];
        let kept_keys = keep_rows(&head_data.visual_keys, &data.token_mask);
        let kept_values = keep_rows(&head_data.visual_values, &data.token_mask);

        let windows: Vec<&Matrix> = data.input.query_windows[h_kv * group..(h_kv + 1) * group]
            .iter()
            .collect();
        let pooled_window = concat_rows(&windows);
        let probe_slices: Vec<&Matrix> = data.probes[h_kv * group..(h_kv + 1) * group]
            .iter()
            .collect();
        let pooled_probes = concat_rows(&probe_slices);

        let sigma = match cell.weighting {
            Weighting::QueryAware => query_channel_norms(&pooled_window).map_err(Error::from)?,
            Weighting::QueryAgnostic => QueryWeights::uniform(d),
        };
        let cov = covariance_pair(&kept_keys, &sigma).map_err(Error::from)?;
        let summary = summarize(
            &pooled_probes,
            &kept_keys,
            &kept_values,
            &cache.heads[h_kv].rotation,
            &cov.weighted,
        )
        .map_err(Error::from)?;
        heads.push(HeadReport {
            head: h_kv,
            summary,
        });

        let head_rank = cache.heads[h_kv].rotation.rank_k;
        if cfg.baselines.headwise_style {
            let sal_sigma = query_channel_norms(&pooled_window).map_err(Error::from)?;
            let mask = headwise_select(&kept_keys, &sal_sigma, head_rank).map_err(Error::from)?;
            let recon = headwise_reconstruct(&kept_keys, &mask);
            let stats = score_stats(&pooled_probes, &kept_keys, &recon, &kept_values)
                .map_err(Error::from)?;
            hw_acc.push(BaselineStats {
                stats,
                mask_overhead_bits: mask.overhead_bits(),
            });
        }
        if cfg.baselines.tokenwise_style {
            let (mask, recon) =
                tokenwise_select(&kept_keys, head_rank, cfg.baselines.tokenwise_interpolate)
                    .map_err(Error::from)?;
            let stats = score_stats(&pooled_probes, &kept_keys, &recon, &kept_values)
                .map_err(Error::from)?;
            tw_acc.push(BaselineStats {
                stats,
                mask_overhead_bits: mask.overhead_bits(),
            });
        }
    }

    let mean = mean_summary(&heads);
    let baselines = if hw_acc.is_empty() && tw_acc.is_empty() {
        None
    } else {
        Some(BaselineCell {
            headwise_style: mean_baseline(&hw_acc),
            tokenwise_style: mean_baseline(&tw_acc),
        })
    };

    Ok(CellReport {
        cell_index: index,
        mode: cell.mode,
        weighting: cell.weighting,
        token_keep: cfg.token_keep,
        channel_keep: cell.channel_keep,
        rank_k,
        rank_clamped: cache.rank_clamped(),
        budget: budget(cfg.token_keep, cell.channel_keep)?.into(),
        bytes: cache_bytes(&cache),
        heads,
        mean,
        baselines,
    })
}

fn mean_baseline(acc: &[BaselineStats]) -> Option<BaselineStats> {
    if acc.is_empty() {
        return None;
    }
    let n = acc.len() as f64;
    let mut mse = 0.0;
    let mut max_abs = 0.0f64;
    let mut kl = 0.0;
    let mut l2 = 0.0;
    let mut bits = 0u64;
    for b in acc {
        mse += b.stats.score_mse / n;
        max_abs = max_abs.max(b.stats.score_max_abs);
        kl += b.stats.weight_kl / n;
        l2 += b.stats.output_l2 / n;
        bits += b.mask_overhead_bits;
    }
    Some(BaselineStats {
        stats: crate::metrics::ScoreStats {
            score_mse: mse,
            score_max_abs: max_abs,
            weight_kl: kl,
            output_l2: l2,
        },
        mask_overhead_bits: bits,
    })
}

/// Runs one experiment over the given grid cells.
pub fn run_with_cells(
    cfg: &ExperimentConfig,
    cells: &[CellSpec],
) -> Result<ExperimentReport, Error> {
    let total_start = Instant::now();
    let gen_start = Instant::now();
    let data = prepare_data(cfg)?;
    let generate_ms = gen_start.elapsed().as_secs_f64() * 1e3;

    let cells_start = Instant::now();
    let reports: Result<Vec<CellReport>, Error> = cells
        .par_iter()
        .enumerate()
        .map(|(index, cell)| run_cell(cfg, &data, index, cell))
        .collect();
    let mut cell_reports = reports?;
    cell_reports.sort_by_key(|c| c.cell_index);
    let cells_ms = cells_start.elapsed().as_secs_f64() * 1e3;

    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.subspace.seed,
        config: cfg.clone(),
        probe_overlap: data.probe_overlap,
        sigma_pooling: "group_concat",
        cells: cell_reports,
        timings_ms: Timings {
            generate_ms,
            cells_ms,
            total_ms: total_start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

/// Single-cell experiment taken from the config's own subspace settings.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, Error> {
    let cell = CellSpec {
        mode: cfg.subspace.mode,
        weighting: cfg.subspace.weighting,
        channel_keep: cfg.subspace.rank_k as f64 / cfg.layout.d as f64,
    };
    run_with_cells(cfg, &[cell])
}

/// Ablation sweep: three solver/weighting variants crossed with the channel
/// keep ratios.
pub fn run_sweep(cfg: &ExperimentConfig, channel_keeps: &[f64]) -> Result<ExperimentReport, Error> {
    run_with_cells(cfg, &ablation_grid(channel_keeps))
}
