//! The TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use mdps_core::data::{DatasetSpec, Split, SyntheticSpec};
use mdps_core::diffusion::{Architecture, TrainConfig};
use mdps_core::eval::AblationPlan;
use mdps_core::mdps::{GuidanceLoss, SamplerConfig};
use mdps_core::oracle::{OracleScale, OracleSetup};
use mdps_core::perception::{default_cache_dir, BackboneKind, DifferenceConfig};
use mdps_core::schedule::ScheduleParams;
use mdps_core::scoring::DetectConfig;
use mdps_core::NoiseSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// At most `i64::MAX`, the largest TOML integer.
    pub seed: u64,
    /// Parent of all run directories.
    pub output_dir: PathBuf,
    /// `wide-resnet-101`, `resnet-101` or `toy`.
    pub backbone: String,
    #[serde(default)]
    pub offline: bool,
    /// Weight cache; the `MDPS_CACHE_DIR` / home default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: Architecture,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default)]
    pub difference: DifferenceConfig,
    #[serde(default)]
    pub ablation: AblationPlan,
    #[serde(default)]
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `<category>/{train,test,ground_truth}`.
    pub root: PathBuf,
    pub category: String,
    pub resize: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_crop: Option<usize>,
    /// Generate a synthetic benchmark into `root` when the category is missing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub y: f64,
    pub scale: OracleScale,
    pub n_samples: usize,
    pub rho: Vec<f64>,
    /// Seeds `seed .. seed + n_seeds` per guidance scale.
    pub n_seeds: u64,
    pub noise_level: usize,
    pub steps: usize,
    pub guidance_loss: GuidanceLoss,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let setup = OracleSetup::default();
        Self {
            prior_mean: setup.prior_mean,
            prior_variance: setup.prior_variance,
            y: setup.y,
            scale: setup.scale,
            n_samples: setup.n_samples,
            rho: vec![0.0, 1.0, 10.0, 50.0],
            n_seeds: 5,
            noise_level: 1000,
            steps: 100,
            guidance_loss: GuidanceLoss::Squared,
        }
    }
}

impl OracleConfig {
    pub fn setup(&self) -> OracleSetup {
        OracleSetup {
            prior_mean: self.prior_mean,
            prior_variance: self.prior_variance,
            y: self.y,
            scale: self.scale,
            n_samples: self.n_samples,
        }
    }

    pub fn sampler(&self, rho: f64) -> SamplerConfig {
        SamplerConfig {
            noise_level: self.noise_level,
            steps: self.steps,
            rho,
            samples: 1,
            guidance_loss: self.guidance_loss,
            ..Default::default()
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Hex SHA-256 of the resolved configuration text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.noise_schedule()?;
        self.dataset(Split::Train).validate()?;
        BackboneKind::parse(&self.backbone)?;
        self.train.validate(&schedule)?;
        self.sampler.validate(&schedule)?;
        self.difference.validate()?;
        if !(0.0..=1.0).contains(&self.detect.lambda) {
            return Err(mdps_core::Error::InvalidArgument(format!(
                "detect.lambda must lie in [0, 1], got {}",
                self.detect.lambda
            ))
            .into());
        }
        if self.detect.top_s == Some(0) {
            return Err(mdps_core::Error::InvalidArgument("detect.top_s must be at least 1".into()).into());
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let p = self.schedule;
        Ok(NoiseSchedule::linear(p.t_max, p.beta_start, p.beta_end)?)
    }

    pub fn dataset(&self, split: Split) -> DatasetSpec {
        DatasetSpec {
            root: self.data.root.clone(),
            category: self.data.category.clone(),
            split,
            resize: self.data.resize,
            center_crop: self.data.center_crop,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(default_cache_dir)
    }
}
