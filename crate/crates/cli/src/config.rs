//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags. The resolved result is written next to every
//! output together with the tool version.

use std::path::{Path, PathBuf};

use echodiff_core::dataset::{ToyConfig, DEFAULT_SPLIT};
use echodiff_core::diffusion::{build_schedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use echodiff_core::io::{atomic_write, write_json};
use echodiff_core::sampler::DEFAULT_GUIDANCE_SCALE;
use echodiff_core::trainer::TrainConfig;
use echodiff_core::{NetConfig, NoiseSchedule, ReverseVariance, SamplerConfig, ScheduleKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Scale the default beta range by `1000 / steps` instead of using
    /// `beta_start` / `beta_end` as given.
    pub scale_with_steps: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END, scale_with_steps: false }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> echodiff_core::Result<NoiseSchedule> {
        if self.scale_with_steps {
            NoiseSchedule::linear_scaled(self.steps)
        } else {
            build_schedule(self.steps, ScheduleKind::Linear, self.beta_start, self.beta_end)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub guidance_scale: f64,
    pub clip_denoised: bool,
    pub variance: ReverseVariance,
    pub seed: u64,
    /// Clips per label map.
    pub n: usize,
    /// Sample with the averaged weights when the checkpoint has them.
    pub use_ema: bool,
    pub preview: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            clip_denoised: true,
            variance: ReverseVariance::default(),
            seed: 0,
            n: 1,
            use_ema: true,
            preview: true,
        }
    }
}

impl SampleConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            guidance_scale: self.guidance_scale,
            clip_denoised: self.clip_denoised,
            seed: self.seed,
            variance: self.variance,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.sampler().problems();
        if self.n == 0 {
            p.push("n must be at least 1".into());
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub toy: ToyConfig,
    /// Output size of CAMUS conversion.
    pub camus_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { split: DEFAULT_SPLIT, split_seed: 0, toy: ToyConfig::default(), camus_size: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Built-in deterministic random-projection features.
    #[default]
    Toy,
    /// External programs configured under `[metrics.standard]`.
    Standard,
}

/// External feature programs. Each is run as `command... <frame-dir>` and
/// prints the embedding as whitespace-separated numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StandardExtractors {
    pub frame_command: Vec<String>,
    pub frame_dim: usize,
    pub video_command: Vec<String>,
    pub video_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub extractor: ExtractorKind,
    pub n_per_map: usize,
    pub seed: u64,
    /// Which part of the patient split supplies the evaluation maps:
    /// `"test"`, `"val"`, `"train"` or `"all"`.
    pub split: String,
    /// Evaluate only the first this many maps (0 = all).
    pub max_maps: usize,
    pub standard: StandardExtractors,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorKind::Toy,
            n_per_map: 10,
            seed: 0,
            split: "test".into(),
            max_maps: 0,
            standard: StandardExtractors::default(),
        }
    }
}

impl MetricsConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = vec![];
        if self.n_per_map == 0 {
            p.push("n_per_map must be at least 1".into());
        }
        if !["test", "val", "train", "all"].contains(&self.split.as_str()) {
            p.push(format!("split must be test|val|train|all, got {:?}", self.split));
        }
        if self.extractor == ExtractorKind::Standard {
            let s = &self.standard;
            if s.frame_command.is_empty() || s.frame_dim == 0 {
                p.push("standard extractor needs metrics.standard.frame_command and frame_dim".into());
            }
            if s.video_command.is_empty() || s.video_dim == 0 {
                p.push("standard extractor needs metrics.standard.video_command and video_dim".into());
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: NetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    /// Defaults, overlaid by `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Invalid(vec![format!("cannot read config {}: {e}", path.display())]))?;
        toml::from_str(&text).map_err(|e| Failure::Invalid(vec![format!("{}: {}", path.display(), e.message())]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml())[..8])
    }

    /// Problems of the sections a training run uses.
    pub fn train_problems(&self) -> Vec<String> {
        let mut p = prefixed("model", self.model.problems());
        p.extend(prefixed("train", self.train.problems()));
        if let Err(e) = self.schedule.build() {
            p.push(format!("schedule: {e}"));
        }
        p.extend(prefixed("data", split_problems(self.data.split)));
        p
    }
}

fn split_problems(r: [f64; 3]) -> Vec<String> {
    if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        vec![format!("split {r:?} must lie in [0, 1] and sum to 1")]
    } else {
        vec![]
    }
}

pub fn prefixed(section: &str, problems: Vec<String>) -> Vec<String> {
    problems.into_iter().map(|p| format!("{section}: {p}")).collect()
}

pub fn check(problems: Vec<String>) -> Result<(), Failure> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invalid(problems))
    }
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    git_rev: &'static str,
    command: &'a str,
    config_fingerprint: String,
}

/// Writes `resolved_config.toml` and `provenance.json` into `dir`.
pub fn write_provenance(dir: &Path, cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    echodiff_core::io::create_dir(dir)?;
    atomic_write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let p = Provenance {
        tool: "echodiff",
        version: env!("CARGO_PKG_VERSION"),
        git_rev: env!("ECHODIFF_GIT_REV"),
        command,
        config_fingerprint: cfg.fingerprint(),
    };
    write_json(&dir.join(PROVENANCE_FILE), &p)?;
    Ok(())
}

/// Fails with a validation error when an input path does not exist.
pub fn require_exists(what: &str, path: &Path) -> Result<PathBuf, Failure> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Failure::Invalid(vec![format!("{what} {} does not exist", path.display())]))
    }
}
