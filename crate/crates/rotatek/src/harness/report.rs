//! Report assembly and emission.
//!
//! Reports exist in two forms: a schema-versioned JSON document carrying the
//! full per-head detail plus config echo, and a flat CSV with a frozen
//! column order for plot scripts. Wall-clock timings are informational only;
//! they are excluded from the CSV so repeated runs of the same config and
//! seed emit byte-identical CSV documents.

use serde::Serialize;

use crate::cache::{BudgetReport, CacheBytes};
use crate::harness::config::ExperimentConfig;
use crate::metrics::{ErrorSummary, ScoreStats};
use crate::rotation::{SolverMode, Weighting};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Frozen CSV column order. Consumers index by name, but the order is part
/// of the contract.
pub const CSV_COLUMNS: [&str; 16] = [
    "cell_index",
    "mode",
    "weighting",
    "token_keep",
    "channel_keep",
    "rank_k",
    "rank_clamped",
    "kv_budget",
    "score_mse",
    "score_max_abs",
    "weight_kl",
    "output_l2",
    "captured_variance_ratio",
    "eckart_young_tail",
    "headwise_style_score_mse",
    "tokenwise_style_score_mse",
];

pub fn mode_label(mode: SolverMode) -> &'static str {
    match mode {
        SolverMode::CholeskyIteration => "cholesky_iteration",
        SolverMode::FullEigh => "full_eigh",
    }
}

pub fn weighting_label(weighting: Weighting) -> &'static str {
    match weighting {
        Weighting::QueryAware => "query_aware",
        Weighting::QueryAgnostic => "query_agnostic",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadReport {
    pub head: usize,
    #[serde(flatten)]
    pub summary: ErrorSummary,
}

/// One comparator selector's aggregate stats.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineStats {
    #[serde(flatten)]
    pub stats: ScoreStats,
    pub mask_overhead_bits: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineCell {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub headwise_style: Option<BaselineStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokenwise_style: Option<BaselineStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetSummary {
    pub token_keep: f64,
    pub channel_keep: f64,
    pub multiplier: f64,
    /// Rounded half-up to two decimals, as displayed.
    pub display: f64,
}

impl From<BudgetReport> for BudgetSummary {
    fn from(b: BudgetReport) -> Self {
        Self {
            token_keep: b.token_keep,
            channel_keep: b.channel_keep,
            multiplier: b.visual_cache_multiplier,
            display: b.display_multiplier(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub cell_index: usize,
    pub mode: SolverMode,
    pub weighting: Weighting,
    pub token_keep: f64,
    pub channel_keep: f64,
    pub rank_k: usize,
    pub rank_clamped: bool,
    pub budget: BudgetSummary,
    pub bytes: CacheBytes,
    pub heads: Vec<HeadReport>,
    /// Head-averaged summary.
    pub mean: ErrorSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<BaselineCell>,
}

/// Phase timings in milliseconds. Informational: never part of the CSV and
/// never compared for determinism.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub generate_ms: f64,
    pub cells_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// True when the probe queries had to reuse the σ-estimation window.
    pub probe_overlap: bool,
    /// How grouped-query σ windows are combined across a kv head's group.
    pub sigma_pooling: &'static str,
    pub cells: Vec<CellReport>,
    pub timings_ms: Timings,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV over cells in the frozen column order. Floats use the
    /// shortest round-trip formatting; the budget column shows the
    /// two-decimal display value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        for cell in &self.cells {
            let hw = cell
                .baselines
                .as_ref()
                .and_then(|b| b.headwise_style.as_ref())
                .map(|b| b.stats.score_mse.to_string())
                .unwrap_or_default();
            let tw = cell
                .baselines
                .as_ref()
                .and_then(|b| b.tokenwise_style.as_ref())
                .map(|b| b.stats.score_mse.to_string())
                .unwrap_or_default();
            let row = [
                cell.cell_index.to_string(),
                mode_label(cell.mode).to_string(),
                weighting_label(cell.weighting).to_string(),
                cell.token_keep.to_string(),
                cell.channel_keep.to_string(),
                cell.rank_k.to_string(),
                cell.rank_clamped.to_string(),
                format!("{:.2}", cell.budget.display),
                cell.mean.score_mse.to_string(),
                cell.mean.score_max_abs.to_string(),
                cell.mean.weight_kl.to_string(),
                cell.mean.output_l2.to_string(),
                cell.mean.captured_variance_ratio.to_string(),
                cell.mean.eckart_young_tail.to_string(),
                hw,
                tw,
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Element-wise mean of per-head summaries.
pub fn mean_summary(heads: &[HeadReport]) -> ErrorSummary {
    let n = heads.len().max(1) as f64;
    let mut acc = ErrorSummary {
        score_mse: 0.0,
        score_max_abs: 0.0,
        weight_kl: 0.0,
        output_l2: 0.0,
        captured_variance_ratio: 0.0,
        eckart_young_tail: 0.0,
    };
    for h in heads {
        acc.score_mse += h.summary.score_mse / n;
        acc.score_max_abs = acc.score_max_abs.max(h.summary.score_max_abs);
        acc.weight_kl += h.summary.weight_kl / n;
        acc.output_l2 += h.summary.output_l2 / n;
        acc.captured_variance_ratio += h.summary.captured_variance_ratio / n;
        acc.eckart_young_tail += h.summary.eckart_young_tail / n;
    }
    acc
}
