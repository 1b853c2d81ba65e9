//! Closed-form Gaussian check of the sampler.
//!
//! Under a Gaussian prior the optimal noise predictor and the posterior for a
//! Gaussian likelihood are both analytic, so the sampler can be checked
//! without any trained network.

use mdps_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::mdps::{mdps_sample_many, ObservationModel, SamplerConfig};
use crate::{Error, ImageTensor, MaskImage, NoiseSchedule, Result, Rng, ValueRange};

/// Isotropic prior `N(mean, variance I)`; a single mean is broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    variance: f64,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "prior variance must be positive, got {variance}"
            )));
        }
        if mean.is_empty() || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("prior mean must be finite and non-empty".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean], variance)
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Prior mean at flattened position `i`.
    pub fn mean_at(&self, i: usize) -> f64 {
        if self.mean.len() == 1 {
            self.mean[0]
        } else {
            self.mean[i % self.mean.len()]
        }
    }
}

/// The exact noise predictor for a Gaussian prior.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    prior: GaussianPrior,
    alpha_bars: Vec<f64>,
}

impl AnalyticDenoiser {
    pub fn new(prior: GaussianPrior, schedule: &NoiseSchedule) -> Self {
        Self {
            prior,
            alpha_bars: schedule.alpha_bars().to_vec(),
        }
    }

    /// `eps*(x_t, t)` for a scalar at flattened position `i`.
    pub fn eps(&self, x_t: f64, alpha_bar: f64, i: usize) -> f64 {
        let denom = alpha_bar * self.prior.variance + 1.0 - alpha_bar;
        (1.0 - alpha_bar).sqrt() * (x_t - alpha_bar.sqrt() * self.prior.mean_at(i)) / denom
    }

    /// `d eps* / d x_t`, identical for every pixel.
    pub fn slope(&self, alpha_bar: f64) -> f64 {
        (1.0 - alpha_bar).sqrt() / (alpha_bar * self.prior.variance + 1.0 - alpha_bar)
    }

    fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("timestep {t} outside the schedule")))
    }
}

impl Denoiser for AnalyticDenoiser {
    fn name(&self) -> String {
        "analytic-gaussian".into()
    }

    fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        if t.len() != x_t.batch() {
            return Err(Error::Shape(format!("{} timesteps for a batch of {}", t.len(), x_t.batch())));
        }
        let mut out = x_t.clone();
        for (b, &step) in t.iter().enumerate() {
            let ab = self.alpha_bar(step)?;
            for (i, v) in out.item_mut(b).iter_mut().enumerate() {
                *v = self.eps(*v as f64, ab, i) as f32;
            }
        }
        Ok(out)
    }

    fn predict_with_vjp(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cotangent: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let eps = self.predict(x_t, t)?;
        let mut grad = cotangent(&eps)?;
        grad.check_same(x_t, "cotangent")?;
        for (b, &step) in t.iter().enumerate() {
            let k = self.slope(self.alpha_bar(step)?);
            for v in grad.item_mut(b) {
                *v = (*v as f64 * k) as f32;
            }
        }
        Ok((eps, grad))
    }
}

/// Posterior `N(mean, variance)` of one pixel under `y ~ N(x0, sigma2)`.
pub fn analytic_posterior(prior_mean: f64, prior_variance: f64, y: f64, sigma2: f64) -> Result<(f64, f64)> {
    if !(sigma2 > 0.0) || !(prior_variance > 0.0) {
        return Err(Error::InvalidArgument("variances must be positive".into()));
    }
    if sigma2.is_infinite() {
        return Ok((prior_mean, prior_variance));
    }
    let total = prior_variance + sigma2;
    Ok((
        (sigma2 * prior_mean + prior_variance * y) / total,
        prior_variance * sigma2 / total,
    ))
}

/// Spatial size of an oracle run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleScale {
    /// A single scalar pixel.
    #[default]
    Scalar,
    /// One channel, 8x8 independent pixels.
    Grid8,
}

impl OracleScale {
    fn side(self) -> usize {
        match self {
            OracleScale::Scalar => 1,
            OracleScale::Grid8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub n_samples: usize,
    pub scale: OracleScale,
    pub noise_level: usize,
    pub steps: usize,
    pub rho: f64,
    pub y: f64,
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    /// Standard error of the empirical mean under the prior variance.
    pub prior_standard_error: f64,
    /// Heuristic `sigma^2 = 1 / (2 rho)`; absent for `rho = 0`.
    pub nominal_sigma2: Option<f64>,
    pub posterior_mean: Option<f64>,
    pub posterior_variance: Option<f64>,
    pub distance_to_y: f64,
    pub distance_to_prior_mean: f64,
    pub distance_to_posterior_mean: Option<f64>,
}

/// One oracle experiment: a constant observation under a scalar prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSetup {
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub y: f64,
    #[serde(default)]
    pub scale: OracleScale,
    pub n_samples: usize,
}

impl Default for OracleSetup {
    fn default() -> Self {
        Self {
            prior_mean: 0.0,
            prior_variance: 0.25,
            y: 1.0,
            scale: OracleScale::Scalar,
            n_samples: 2000,
        }
    }
}

/// Draws `n_samples` fully masked reconstructions of the constant image `y`
/// with the analytic denoiser and summarises them.
pub fn oracle_check(
    setup: &OracleSetup,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<OracleReport> {
    let OracleSetup {
        prior_mean,
        prior_variance,
        y,
        scale,
        n_samples,
    } = *setup;
    if n_samples < 2 {
        return Err(Error::InvalidArgument("oracle needs at least 2 samples".into()));
    }
    let prior = GaussianPrior::scalar(prior_mean, prior_variance)?;
    let model = AnalyticDenoiser::new(prior, schedule);
    let side = scale.side();
    let y_img = ImageTensor::filled(1, side, side, y as f32, ValueRange::Unbounded)?;
    let obs = ObservationModel::new(&y_img, MaskImage::ones(side, side))?;
    let cfg = SamplerConfig {
        samples: n_samples,
        max_batch: n_samples,
        ..cfg.clone()
    };
    let draws = mdps_sample_many(&obs, &model, schedule, &cfg, &Rng::new(seed))?;
    let values: Vec<f64> = draws
        .iter()
        .flat_map(|d| d.data().iter().map(|&v| v as f64))
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let nominal_sigma2 = (cfg.rho > 0.0).then(|| 1.0 / (2.0 * cfg.rho));
    let posterior = nominal_sigma2
        .map(|s2| analytic_posterior(prior_mean, prior_variance, y, s2))
        .transpose()?;
    Ok(OracleReport {
        seed,
        n_samples,
        scale,
        noise_level: cfg.noise_level,
        steps: cfg.steps,
        rho: cfg.rho,
        y,
        prior_mean,
        prior_variance,
        empirical_mean: mean,
        empirical_variance: variance,
        prior_standard_error: (prior_variance / n).sqrt(),
        nominal_sigma2,
        posterior_mean: posterior.map(|p| p.0),
        posterior_variance: posterior.map(|p| p.1),
        distance_to_y: (mean - y).abs(),
        distance_to_prior_mean: (mean - prior_mean).abs(),
        distance_to_posterior_mean: posterior.map(|p| (mean - p.0).abs()),
    })
}

/// Sampler settings under which the unguided sampler reproduces the prior:
/// starting from the last training timestep removes the pull towards `y`.
pub fn oracle_sampler_config(rho: f64) -> SamplerConfig {
    SamplerConfig {
        noise_level: 1000,
        steps: 100,
        rho,
        samples: 1,
        ..Default::default()
    }
}
