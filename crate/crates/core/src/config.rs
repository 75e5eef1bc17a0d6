//! Run configuration shared by the CLI subcommands.
//!
//! A run config may come from a TOML file; command-line flags override file
//! values. The effective config is echoed into each run's manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{AlphaScope, GuidanceConfig, DEFAULT_CFG_SCALE, DEFAULT_LAMBDA};
use crate::orchestrator::{GenerationConfig, DEFAULT_BATCH_SIZE, DEFAULT_OUTPUT_SCALE};
use crate::scalewise::{ScaleSchedule, DEFAULT_EARLY_STEPS};
use crate::transformer::ModelDims;

pub const DEFAULT_SWEEP: [f64; 5] = [0.6, 0.7, 0.8, 0.85, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub story: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// `toy`, `full`, or a size list such as `1x1,2x2,4x4,8x8`.
    pub schedule: String,
    pub lambda: f64,
    pub early_steps: Vec<usize>,
    pub cfg_scale: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub enable_ipr: bool,
    pub enable_asi: bool,
    pub enable_sga: bool,
    pub alpha_scope: AlphaScope,
    pub model: ModelDims,
    pub output_scale: usize,
    pub sweep: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            story: None,
            out: None,
            seed: 0,
            schedule: "toy".into(),
            lambda: DEFAULT_LAMBDA,
            early_steps: DEFAULT_EARLY_STEPS.to_vec(),
            cfg_scale: DEFAULT_CFG_SCALE,
            batch_size: DEFAULT_BATCH_SIZE,
            temperature: 0.0,
            enable_ipr: true,
            enable_asi: true,
            enable_sga: true,
            alpha_scope: AlphaScope::PerLayer,
            model: ModelDims::default(),
            output_scale: DEFAULT_OUTPUT_SCALE,
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1),
            message: e.message().trim().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn build_schedule(&self) -> Result<ScaleSchedule> {
        let base = match self.schedule.trim() {
            "toy" => ScaleSchedule::toy(),
            "full" => ScaleSchedule::full(),
            custom => ScaleSchedule::new(ScaleSchedule::parse_sizes(custom)?, [])?,
        };
        base.with_early_steps(self.early_steps.iter().copied())
    }

    pub fn generation_config(&self) -> Result<GenerationConfig> {
        let schedule = self.build_schedule()?;
        let guidance = GuidanceConfig {
            lambda: self.lambda,
            early_steps: schedule.early_steps().clone(),
            cfg_scale: self.cfg_scale,
            enable_ipr: self.enable_ipr,
            enable_asi: self.enable_asi,
            enable_sga: self.enable_sga,
            alpha_scope: self.alpha_scope,
        };
        let config = GenerationConfig {
            schedule,
            guidance,
            dims: self.model,
            global_seed: self.seed,
            batch_size: self.batch_size,
            temperature: self.temperature,
            gamma: None,
            output_scale: self.output_scale,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn sweep_values(&self) -> Result<Vec<f64>> {
        let values = self.sweep.clone().unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
        if values.is_empty() {
            return Err(Error::validation("sweep list is empty"));
        }
        if let Some(bad) = values.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::validation(format!(
                "sweep lambda {bad} outside [0, 1]"
            )));
        }
        Ok(values)
    }
}

/// Parses a comma-separated list.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::validation(format!("bad {what} `{}`", s.trim())))
        })
        .collect()
}
