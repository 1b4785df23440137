//! Application configuration: one structured-text file with `[model]`,
//! `[schedule]`, `[train]`, `[data]`, and `[sampler]` sections, each mapping
//! one-to-one onto the corresponding config type. Every section and field is
//! optional and falls back to its default; CLI flags override config keys.

use std::path::{Path, PathBuf};

use crate::data::synth::SyntheticSpec;
use crate::error::{Error, Result};
use crate::net::{ModelConfig, SamplerMode};
use crate::sample::SamplerPlan;
use crate::schedule::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::train::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV_VAR: &str = "HEATDIFF_CONFIG";

/// `[schedule]`: the diffusion noise schedule's defining scalars. The step
/// count lives in `[model] t_steps`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// `[data]`: either a path to COCO-format annotations or an inline synthetic
/// generator spec (used when no annotation file is configured).
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct DataSection {
    /// COCO-format annotations file.
    pub annotations: Option<PathBuf>,
    /// Root directory for the image files named in the annotations.
    pub image_root: Option<PathBuf>,
    /// Keep only the first N records.
    pub limit: Option<usize>,
    /// Synthetic generator spec; defaults to the humanoid preset at the
    /// model's input size.
    pub synth: Option<SyntheticSpec>,
    /// Number of records to generate when using the synthetic source.
    pub synth_count: Option<usize>,
}

/// `[sampler]`: reverse-process defaults.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub steps: usize,
    pub mode: SamplerMode,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: 1,
            mode: SamplerMode::Direct,
        }
    }
}

/// The whole application configuration.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub sampler: SamplerSection,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Loads configuration with the standard resolution order: an explicit
    /// path if given, else the `HEATDIFF_CONFIG` environment variable, else
    /// built-in defaults. An explicitly named file that is missing or
    /// malformed is an error, never a silent fallback.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from),
        };
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    /// Builds the diffusion schedule from `[schedule]` plus `[model] t_steps`.
    pub fn make_schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(
            self.model.t_steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.kind,
        )
    }

    /// Builds the sampling plan from `[sampler]` against a schedule length.
    pub fn sampler_plan(&self, t_total: usize) -> Result<SamplerPlan> {
        SamplerPlan::evenly_spaced(self.sampler.mode, t_total, self.sampler.steps)
    }

    /// The synthetic spec to use: the configured one, or the humanoid preset
    /// sized to the model input.
    pub fn synth_spec(&self) -> SyntheticSpec {
        self.data.synth.clone().unwrap_or_else(|| {
            SyntheticSpec::humanoid13(self.model.input_h, self.model.input_w, self.train.seed)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::invalid("sampler steps must be at least 1".to_string()));
        }
        Ok(())
    }
}
