//! Experiment configuration: JSON-loadable, validated, echoed into reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::SequenceLayout;
use crate::decode::DecodeConfig;
use crate::harness::synthetic::SyntheticSpec;
use crate::rotation::{SubspaceConfig, DEFAULT_QUERY_WINDOW};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {reason}")]
    Invalid { reason: String },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// Where one experiment's activations come from.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum DataSource {
    /// Generated in-process from [`SyntheticSpec`].
    #[default]
    Synthetic,
    /// Loaded from a trace container on disk.
    Trace(PathBuf),
}

/// Which comparator selectors to run next to the rotation pipeline.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineFlags {
    #[serde(default)]
    pub headwise_style: bool,
    #[serde(default)]
    pub tokenwise_style: bool,
    /// Mean interpolation for pruned token-wise channels.
    #[serde(default)]
    pub tokenwise_interpolate: bool,
}

impl BaselineFlags {
    pub fn all() -> Self {
        Self {
            headwise_style: true,
            tokenwise_style: true,
            tokenwise_interpolate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub layout: SequenceLayout,
    pub subspace: SubspaceConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Visual-token keep ratio; the mask itself is an input, not a score.
    #[serde(default = "default_token_keep")]
    pub token_keep: f64,
    #[serde(default)]
    pub data_source: DataSource,
    #[serde(default)]
    pub baselines: BaselineFlags,
    /// Recent-query window length per query head.
    #[serde(default = "default_window")]
    pub query_window: usize,
    /// Synthetic generator knobs; must agree with the layout when present.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_token_keep() -> f64 {
    1.0
}

fn default_window() -> usize {
    DEFAULT_QUERY_WINDOW
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            layout: SequenceLayout {
                n_visual: 192,
                n_text: 16,
                d: 64,
                heads_q: 4,
                heads_kv: 2,
            },
            subspace: SubspaceConfig::new(16, 0),
            decode: DecodeConfig::default(),
            token_keep: 1.0,
            data_source: DataSource::Synthetic,
            baselines: BaselineFlags::default(),
            query_window: DEFAULT_QUERY_WINDOW,
            synthetic: None,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.layout.validate().map_err(|e| ConfigError::Invalid {
            reason: e.to_string(),
        })?;
        if !(self.token_keep > 0.0 && self.token_keep <= 1.0) {
            return Err(ConfigError::Invalid {
                reason: format!("token_keep {} outside (0, 1]", self.token_keep),
            });
        }
        if self.query_window == 0 {
            return Err(ConfigError::Invalid {
                reason: "query_window must be >= 1".into(),
            });
        }
        self.subspace
            .validate(self.layout.d)
            .map_err(|e| ConfigError::Invalid {
                reason: e.to_string(),
            })?;
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
            if spec.n_tokens != self.layout.n_visual || spec.d != self.layout.d {
                return Err(ConfigError::Invalid {
                    reason: format!(
                        "synthetic spec ({}x{}) disagrees with layout ({}x{})",
                        spec.n_tokens, spec.d, self.layout.n_visual, self.layout.d
                    ),
                });
            }
        }
        if let DataSource::Trace(path) = &self.data_source {
            if !path.exists() {
                return Err(ConfigError::Invalid {
                    reason: format!("trace file {} does not exist", path.display()),
                });
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(cfg)
    }

    /// Synthetic spec for this config: the explicit one, or a default shaped
    /// by the layout.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        self.synthetic.clone().unwrap_or_else(|| {
            SyntheticSpec::for_shape(self.layout.n_visual, self.layout.d, self.subspace.seed)
        })
    }
}
