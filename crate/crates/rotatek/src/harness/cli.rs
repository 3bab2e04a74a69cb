//! Command-line interface.
//!
//! Subcommands: `gen` (synthetic trace to file), `compress` (trace →
//! compressed-cache stats), `decode` (single-step decode plus error report),
//! `sweep` (ablation grid runner), `compare` (rotation vs selection
//! baselines). Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numerical breakdown.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cache::prefill_compress;
use crate::decode::{attention_output, decode_scores, DecodeConfig, DecodePath};
use crate::error::Error;
use crate::harness::config::{BaselineFlags, DataSource, ExperimentConfig};
use crate::harness::experiment::{prepare_data, run_experiment, run_sweep, ExperimentData};
use crate::harness::report::ExperimentReport;
use crate::harness::trace::{trace_from_prefill, trace_write};
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "rotatek",
    about = "Rotation-based key-channel pruning: compressed-cache experiments at desk scale",
    disable_help_subcommand = true
)]
struct Cli {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report/trace output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: OutputFormat,
    /// Suppress stdout report text.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for the sweep runner (default: rayon's choice).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct KeepArgs {
    /// Channel keep ratio in (0, 1]; sets rank_k = round(keep · d).
    #[arg(long)]
    channel_keep: Option<f64>,
    /// Token keep ratio in (0, 1].
    #[arg(long)]
    token_keep: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trace container.
    Gen,
    /// Build a compressed cache and report budget and byte accounting.
    Compress(KeepArgs),
    /// Run a single-step decode with score-error diagnostics.
    Decode(KeepArgs),
    /// Run the solver/weighting ablation grid over channel keep ratios.
    Sweep {
        #[command(flatten)]
        keeps: KeepArgs,
        /// Comma-separated channel keep ratios.
        #[arg(long, default_value = "0.5,0.375,0.25", value_delimiter = ',')]
        channel_keeps: Vec<f64>,
    },
    /// Compare the rotation pipeline against selection baselines.
    Compare(KeepArgs),
}

/// CLI entry point; returns the process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.subspace.seed = seed;
        if let Some(spec) = &mut cfg.synthetic {
            spec.seed = seed;
        }
    }
    Ok(cfg)
}

fn apply_keeps(cfg: &mut ExperimentConfig, keeps: &KeepArgs) -> Result<(), Error> {
    if let Some(keep) = keeps.channel_keep {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Usage(format!(
                "--channel-keep {keep} outside (0, 1]"
            )));
        }
        let d = cfg.layout.d as f64;
        cfg.subspace.rank_k = ((keep * d).round() as usize).clamp(1, cfg.layout.d);
    }
    if let Some(keep) = keeps.token_keep {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Usage(format!("--token-keep {keep} outside (0, 1]")));
        }
        cfg.token_keep = keep;
    }
    Ok(())
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T, Error> + Send,
) -> Result<T, Error> {
    match threads {
        None => f(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Usage(format!("cannot build thread pool: {e}")))?;
            pool.install(f)
        }
    }
}

fn emit_report(cli: &Cli, report: &ExperimentReport) -> Result<(), Error> {
    let text = match cli.format {
        OutputFormat::Json => report.to_json(),
        OutputFormat::Csv => report.to_csv(),
    };
    if let Some(path) = &cli.out {
        std::fs::write(path, &text)?;
    }
    if !cli.quiet {
        println!("{text}");
    }
    Ok(())
}

/// Decode-level diagnostics over the probe queries, in double precision over
/// the single-precision cache.
#[derive(Debug, Clone, Copy, Serialize)]
struct DecodeCheck {
    /// max |exact − decoded| over heads, probes, and tokens.
    max_abs_score_error: f64,
    /// max |monolithic − split| over heads, probes, and channels.
    split_vs_monolithic_max_abs: f64,
}

fn decode_check(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<DecodeCheck, Error> {
    let cache = prefill_compress(&data.input, &data.token_mask, &cfg.subspace, &cfg.layout)?;
    let layout = &cfg.layout;
    let scale = 1.0 / (layout.d as f64).sqrt();
    let mut max_err = 0.0f64;
    let mut max_path = 0.0f64;
    for head in 0..layout.heads_q {
        let h_kv = layout.kv_head_for(head);
        let head_data = &data.input.heads[h_kv];
        let probes = &data.probes[head];
        for p in 0..probes.rows() {
            let q = probes.row(p);
            let got = decode_scores(q, &cache, head)?;
            let mut idx = 0;
            for (i, keep) in data.token_mask.iter().enumerate() {
                if !keep {
                    continue;
                }
                let exact = dot(q, head_data.visual_keys.row(i)) * scale;
                max_err = max_err.max((exact - got[idx]).abs());
                idx += 1;
            }
            for t in 0..layout.n_text {
                let exact = dot(q, head_data.text_keys.row(t)) * scale;
                max_err = max_err.max((exact - got[idx + t]).abs());
            }
            let mono = attention_output(
                q,
                &cache,
                head,
                &DecodeConfig {
                    path: DecodePath::Monolithic,
                    ..cfg.decode
                },
            )?;
            let split = attention_output(
                q,
                &cache,
                head,
                &DecodeConfig {
                    path: DecodePath::SplitK,
                    ..cfg.decode
                },
            )?;
            for (a, b) in mono.iter().zip(&split) {
                max_path = max_path.max((a - b).abs());
            }
        }
    }
    Ok(DecodeCheck {
        max_abs_score_error: max_err,
        split_vs_monolithic_max_abs: max_path,
    })
}

#[derive(Debug, Serialize)]
struct CompressStats {
    budget: crate::harness::report::BudgetSummary,
    bytes: crate::cache::CacheBytes,
    requested_rank: usize,
    rank_clamped: bool,
    n_visual_kept: usize,
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Gen => {
            let cfg = resolve_config(&cli)?;
            cfg.validate()?;
            let Some(out) = cli.out.clone() else {
                return Err(Error::Usage("gen requires --out <path>".into()));
            };
            if !matches!(cfg.data_source, DataSource::Synthetic) {
                return Err(Error::Usage(
                    "gen only supports synthetic data sources".into(),
                ));
            }
            let data = prepare_data(&cfg)?;
            let mask = if cfg.token_keep < 1.0 {
                Some(data.token_mask.as_slice())
            } else {
                None
            };
            // The trace stores the full query streams (σ window plus probes).
            let mut input = data.input.clone();
            for (window, probe) in input.query_windows.iter_mut().zip(&data.probes) {
                let mut rows: Vec<Vec<f64>> =
                    (0..window.rows()).map(|i| window.row(i).to_vec()).collect();
                rows.extend((0..probe.rows()).map(|i| probe.row(i).to_vec()));
                *window = crate::linalg::Matrix::from_rows(&rows).expect("rectangular");
            }
            let trace = trace_from_prefill(&input, &cfg.layout, mask);
            trace_write(&out, &trace)?;
            if !cli.quiet {
                println!("wrote trace to {}", out.display());
            }
            Ok(())
        }
        Command::Compress(keeps) => {
            let mut cfg = resolve_config(&cli)?;
            apply_keeps(&mut cfg, keeps)?;
            cfg.validate()?;
            let data = prepare_data(&cfg)?;
            let cache =
                prefill_compress(&data.input, &data.token_mask, &cfg.subspace, &cfg.layout)?;
            let channel_keep = cfg.subspace.rank_k as f64 / cfg.layout.d as f64;
            let stats = CompressStats {
                budget: crate::cache::budget(cfg.token_keep, channel_keep)?.into(),
                bytes: crate::cache::cache_bytes(&cache),
                requested_rank: cache.requested_rank,
                rank_clamped: cache.rank_clamped(),
                n_visual_kept: cache.n_visual(),
            };
            let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
            if let Some(path) = &cli.out {
                std::fs::write(path, &text)?;
            }
            if !cli.quiet {
                println!("{text}");
            }
            Ok(())
        }
        Command::Decode(keeps) => {
            let mut cfg = resolve_config(&cli)?;
            apply_keeps(&mut cfg, keeps)?;
            cfg.validate()?;
            let report = run_experiment(&cfg)?;
            let data = prepare_data(&cfg)?;
            let check = decode_check(&cfg, &data)?;
            #[derive(Serialize)]
            struct DecodeDocument {
                decode: DecodeCheck,
                experiment: ExperimentReport,
            }
            let doc = DecodeDocument {
                decode: check,
                experiment: report,
            };
            let text = match cli.format {
                OutputFormat::Json => serde_json::to_string_pretty(&doc).expect("serializes"),
                OutputFormat::Csv => doc.experiment.to_csv(),
            };
            if let Some(path) = &cli.out {
                std::fs::write(path, &text)?;
            }
            if !cli.quiet {
                println!("max-abs score error: {:.3e}", check.max_abs_score_error);
                println!(
                    "split vs monolithic: {:.3e}",
                    check.split_vs_monolithic_max_abs
                );
                println!("{text}");
            }
            Ok(())
        }
        Command::Sweep {
            keeps,
            channel_keeps,
        } => {
            let mut cfg = resolve_config(&cli)?;
            apply_keeps(&mut cfg, keeps)?;
            cfg.validate()?;
            if channel_keeps.is_empty() {
                return Err(Error::Usage(
                    "sweep requires at least one channel keep ratio".into(),
                ));
            }
            for &k in channel_keeps {
                if !(k > 0.0 && k <= 1.0) {
                    return Err(Error::Usage(format!("channel keep {k} outside (0, 1]")));
                }
            }
            let report = with_threads(cli.threads, || run_sweep(&cfg, channel_keeps))?;
            emit_report(&cli, &report)
        }
        Command::Compare(keeps) => {
            let mut cfg = resolve_config(&cli)?;
            cfg.baselines = BaselineFlags::all();
            apply_keeps(&mut cfg, keeps)?;
            if keeps.channel_keep.is_none() {
                let d = cfg.layout.d as f64;
                cfg.subspace.rank_k = ((0.25 * d).round() as usize).clamp(1, cfg.layout.d);
            }
            cfg.validate()?;
            let report = with_threads(cli.threads, || run_experiment(&cfg))?;
            if !cli.quiet {
                print_compare_table(&report);
            }
            emit_report(&cli, &report)
        }
    }
}

fn print_compare_table(report: &ExperimentReport) {
    for cell in &report.cells {
        println!(
            "channel_keep={} rank_k={} kv_budget={:.2}",
            cell.channel_keep, cell.rank_k, cell.budget.display
        );
        println!(
            "  {:<18} {:>12} {:>12} {:>12} {:>12} {:>10}",
            "method", "score_mse", "max_abs", "weight_kl", "output_l2", "mask_bits"
        );
        println!(
            "  {:<18} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>10}",
            "rotation",
            cell.mean.score_mse,
            cell.mean.score_max_abs,
            cell.mean.weight_kl,
            cell.mean.output_l2,
            "-"
        );
        if let Some(b) = &cell.baselines {
            if let Some(hw) = &b.headwise_style {
                println!(
                    "  {:<18} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>10}",
                    "headwise-style",
                    hw.stats.score_mse,
                    hw.stats.score_max_abs,
                    hw.stats.weight_kl,
                    hw.stats.output_l2,
                    hw.mask_overhead_bits
                );
            }
            if let Some(tw) = &b.tokenwise_style {
                println!(
                    "  {:<18} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>10}",
                    "tokenwise-style",
                    tw.stats.score_mse,
                    tw.stats.score_max_abs,
                    tw.stats.weight_kl,
                    tw.stats.output_l2,
                    tw.mask_overhead_bits
                );
            }
        }
    }
}
