use std::path::{Path, PathBuf};

use affectflow::affectmodel::{SolveMode, TrainConfig};
use affectflow::annotate::AnnotationSource;
use affectflow::cemoflow::Format;
use affectflow::pipeline::BuildConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::GlobalArgs;

pub const TOKEN_ENV: &str = "AFFECTFLOW_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset read by train, infer, export-steering, plotdata and stats.
    pub dataset: Option<PathBuf>,
    pub format: Format,
    pub mode: SolveMode,
    pub build: BuildConfig,
    pub train: TrainConfig,
    pub steering: SteeringConfig,
    pub plotdata: PlotConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            format: Format::Csv,
            mode: SolveMode::Fixed,
            build: BuildConfig::default(),
            train: TrainConfig::default(),
            steering: SteeringConfig::default(),
            plotdata: PlotConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub anchors: Option<PathBuf>,
    pub lambda_base: f64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            anchors: None,
            lambda_base: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Subsample to at most this many rows.
    pub samples: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Config file (if any), then flags, then the token from the environment.
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(out) = &args.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(factor) = args.factor {
            cfg.build.factor = factor;
        }
        if let Some(mode) = args.mode {
            cfg.mode = mode;
        }
        if let Some(url) = &args.endpoint {
            cfg.build.annotation.source = AnnotationSource::Endpoint;
            cfg.build.annotation.endpoint_url = Some(url.clone());
        }
        if let Some(delta) = args.delta {
            cfg.build.annotation.delta = delta;
        }
        if let Ok(token) = std::env::var(TOKEN_ENV) {
            if !token.is_empty() {
                cfg.build.annotation.api_token = Some(token);
            }
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Dataset path: `--input`, then the config, then the build output.
    pub fn dataset_path(&self, input: Option<&Path>) -> PathBuf {
        input
            .map(Path::to_path_buf)
            .or_else(|| self.dataset.clone())
            .unwrap_or_else(|| self.out.join(affectflow::pipeline::dataset_file_name(self.format)))
    }
}
