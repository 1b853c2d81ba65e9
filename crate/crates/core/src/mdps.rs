//! Masked posterior sampling.
//!
//! Pixels with `m = 0` are trusted: their noise estimate is the exact
//! noise that maps `y` to `x_t`, so the reconstruction reproduces `y` there.
//! Pixels with `m = 1` use the prior denoiser steered towards `y` by the
//! gradient of `||y - x0_prior||^2` with scale `rho`.

use mdps_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::{finish_sample, noised_start, predict_x0, reverse_step, Denoiser};
use crate::{Error, ImageTensor, MaskImage, NoiseSchedule, Result, Rng, ValueRange};

/// A test image and the mask of pixels suspected to be anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    y: ImageTensor,
    mask: MaskImage,
}

impl ObservationModel {
    /// `y` is taken to model space if it is a `[0,1]` image.
    pub fn new(y: &ImageTensor, mask: MaskImage) -> Result<Self> {
        if !mask.matches(y) {
            return Err(Error::Shape(format!(
                "mask is {}x{}, image is {}x{}",
                mask.height(),
                mask.width(),
                y.height(),
                y.width()
            )));
        }
        Ok(Self {
            y: y.to_model_space(),
            mask,
        })
    }

    pub fn y(&self) -> &ImageTensor {
        &self.y
    }

    pub fn mask(&self) -> &MaskImage {
        &self.mask
    }

    fn masked(&self, i: usize) -> bool {
        self.mask.data()[i % self.mask.data().len()] == 1
    }
}

/// Scalar loss whose gradient steers the masked region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceLoss {
    /// `||y - x0_prior||^2`.
    #[default]
    Squared,
    /// `||y - x0_prior||`, which keeps the step size independent of the residual.
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Starting noise level `T`.
    pub noise_level: usize,
    /// Number of reverse steps `N`; must divide `noise_level`.
    pub steps: usize,
    pub rho: f64,
    /// Posterior samples per image, `N_s`.
    pub samples: usize,
    pub guidance_loss: GuidanceLoss,
    /// Evaluate the guidance loss on masked pixels only.
    pub restrict_loss_to_mask: bool,
    /// Chains evaluated together in one network call.
    pub max_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            noise_level: 200,
            steps: 10,
            rho: 100.0,
            samples: 16,
            guidance_loss: GuidanceLoss::Squared,
            restrict_loss_to_mask: false,
            max_batch: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 || self.noise_level == 0 || self.noise_level % self.steps != 0 {
            return fail(format!(
                "noise_level {} must be a positive multiple of steps {}",
                self.noise_level, self.steps
            ));
        }
        if self.noise_level > schedule.t_max() {
            return fail(format!(
                "noise_level {} exceeds T_max {}",
                self.noise_level,
                schedule.t_max()
            ));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return fail(format!("rho must be finite and non-negative, got {}", self.rho));
        }
        if self.samples == 0 || self.max_batch == 0 {
            return fail("samples and max_batch must be at least 1".into());
        }
        Ok(())
    }

    fn guidance(&self) -> Guidance {
        Guidance {
            rho: self.rho,
            loss: self.guidance_loss,
            restrict: self.restrict_loss_to_mask,
        }
    }
}

/// Guidance settings for [`posterior_denoiser`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub rho: f64,
    pub loss: GuidanceLoss,
    pub restrict: bool,
}

impl Guidance {
    pub fn squared(rho: f64) -> Self {
        Self {
            rho,
            loss: GuidanceLoss::Squared,
            restrict: false,
        }
    }
}

/// Diagnostics of one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// Loop index `n`, counting down from `N` to 1.
    pub step: usize,
    pub t: usize,
    pub s: usize,
    /// Clean-image estimate of every chain.
    pub x0_hat: Vec<ImageTensor>,
    /// Norm of the guidance gradient per chain; zero when guidance is off.
    pub guidance_grad_norm: Vec<f64>,
}

/// Gradient of the guidance loss with respect to `x_t`, plus the prior noise
/// prediction, for every chain in the batch.
pub fn guidance_gradient(
    x_t: &Tensor,
    t: usize,
    obs: &ObservationModel,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    loss: GuidanceLoss,
    restrict: bool,
) -> Result<(Tensor, Tensor)> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let y = obs.y.data();
    let mut residual: Option<Tensor> = None;
    let mut cotangent = |eps: &Tensor| -> Result<Tensor> {
        let mut r = x_t.clone();
        for item in 0..x_t.batch() {
            let x0 = predict_x0(x_t.item(item), eps.item(item), ab)?;
            let out = r.item_mut(item);
            for (i, (o, (&x0, &yv))) in out.iter_mut().zip(x0.iter().zip(y)).enumerate() {
                let w = if restrict && !obs.masked(i) { 0.0 } else { 1.0 };
                *o = w * (x0 - yv);
            }
            let scale = match loss {
                GuidanceLoss::Squared => 2.0,
                GuidanceLoss::Norm => {
                    let norm = out.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        1.0 / norm
                    } else {
                        0.0
                    }
                }
            };
            out.iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
        }
        let cot = r.scale((-b / a) as f32);
        residual = Some(r);
        Ok(cot)
    };
    let (eps, vjp) = model.predict_with_vjp(x_t, &vec![t; x_t.batch()], &mut cotangent)?;
    let r = residual.ok_or_else(|| Error::GradientUnavailable(model.name()))?;
    let grad = r.zip_map(&vjp, |r, j| (r as f64 / a + j as f64) as f32)?;
    Ok((grad, eps))
}

fn posterior_batch(
    x_t: &Tensor,
    t: usize,
    obs: &ObservationModel,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    guidance: &Guidance,
) -> Result<(Tensor, Vec<f64>)> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let y = obs.y.data();
    let mut out = x_t.clone();
    for item in 0..x_t.batch() {
        for (o, &yv) in out.item_mut(item).iter_mut().zip(y) {
            *o = ((*o as f64 - a * yv as f64) / b) as f32;
        }
    }
    let mut norms = vec![0.0; x_t.batch()];
    if obs.mask.is_empty() {
        return Ok((out, norms));
    }
    let guided = if guidance.rho > 0.0 {
        let (grad, mut eps) =
            guidance_gradient(x_t, t, obs, model, schedule, guidance.loss, guidance.restrict)?;
        for (item, norm) in norms.iter_mut().enumerate() {
            *norm = grad.item(item).iter().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
        }
        let k = guidance.rho * b;
        for (e, &g) in eps.data_mut().iter_mut().zip(grad.data()) {
            *e = (*e as f64 + k * g as f64) as f32;
        }
        eps
    } else {
        model.predict(x_t, &vec![t; x_t.batch()])?
    };
    guided.check_same(&out, "denoiser output")?;
    let per_item = x_t.item_len();
    for (i, (o, &g)) in out.data_mut().iter_mut().zip(guided.data()).enumerate() {
        if obs.masked(i % per_item) {
            *o = g;
        }
    }
    Ok((out, norms))
}

/// The blended noise estimate for a single `x_t`.
pub fn posterior_denoiser(
    x_t: &ImageTensor,
    t: usize,
    obs: &ObservationModel,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    guidance: &Guidance,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument("t must be at least 1".into()));
    }
    x_t.check_same_shape(&obs.y, "x_t and y")?;
    let (eps, _) = posterior_batch(&x_t.to_batch(), t, obs, model, schedule, guidance)?;
    ImageTensor::from_batch_item(&eps, 0, ValueRange::Unbounded)
}

fn check_finite(values: &[f32], stage: &str, step: usize) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: stage.into(),
            step,
        });
    }
    Ok(())
}

/// Runs one chain per entry of `rngs`, in batches of `cfg.max_batch`.
fn run_chains(
    obs: &ObservationModel,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rngs: &mut [Rng],
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Vec<ImageTensor>> {
    cfg.validate(schedule)?;
    let guidance = cfg.guidance();
    let [c, h, w] = obs.y.shape();
    let (big_t, n_steps) = (cfg.noise_level, cfg.steps);
    let mut outputs = Vec::with_capacity(rngs.len());
    if let Some(tr) = trace.as_deref_mut() {
        tr.clear();
    }
    for (chunk_idx, chunk) in rngs.chunks_mut(cfg.max_batch).enumerate() {
        let start: Vec<f32> = chunk
            .iter_mut()
            .flat_map(|rng| noised_start(obs.y.data(), schedule.alpha_bar(big_t), rng))
            .collect();
        let mut x = Tensor::from_vec([chunk.len(), c, h, w], start)?;
        for (k, n) in (1..=n_steps).rev().enumerate() {
            let t = big_t * n / n_steps;
            let s = big_t * (n - 1) / n_steps;
            let (eps, norms) = posterior_batch(&x, t, obs, model, schedule, &guidance)?;
            check_finite(eps.data(), "posterior noise estimate", n)?;
            if let Some(tr) = trace.as_deref_mut() {
                let x0_hat = (0..chunk.len())
                    .map(|b| {
                        let v = predict_x0(x.item(b), eps.item(b), schedule.alpha_bar(t))?;
                        ImageTensor::new(c, h, w, v, ValueRange::Unbounded)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if chunk_idx == 0 {
                    tr.push(StepTrace {
                        step: n,
                        t,
                        s,
                        x0_hat,
                        guidance_grad_norm: norms,
                    });
                } else {
                    tr[k].x0_hat.extend(x0_hat);
                    tr[k].guidance_grad_norm.extend(norms);
                }
            }
            let mut next = Vec::with_capacity(x.numel());
            for (b, rng) in chunk.iter_mut().enumerate() {
                next.extend(reverse_step(x.item(b), eps.item(b), schedule, t, s, rng)?);
            }
            check_finite(&next, "x_s", n)?;
            x = Tensor::from_vec(x.shape(), next)?;
        }
        for b in 0..chunk.len() {
            outputs.push(finish_sample(c, h, w, x.item(b).to_vec(), obs.y.range())?);
        }
    }
    Ok(outputs)
}

/// One posterior reconstruction drawn with `rng`.
///
/// The result is clamped to `[-1, 1]` unless `y` is tagged as unbounded.
pub fn mdps_sample(
    obs: &ObservationModel,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    let mut out = run_chains(obs, model, schedule, cfg, std::slice::from_mut(rng), None)?;
    Ok(out.remove(0))
}

/// `cfg.samples` reconstructions; chain `j` draws from `rng.split(j)`.
pub fn mdps_sample_many(
    obs: &ObservationModel,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &Rng,
) -> Result<Vec<ImageTensor>> {
    let mut rngs: Vec<Rng> = (0..cfg.samples as u64).map(|j| rng.split(j)).collect();
    run_chains(obs, model, schedule, cfg, &mut rngs, None)
}

/// [`mdps_sample_many`] that also records per-step diagnostics.
pub fn mdps_sample_many_traced(
    obs: &ObservationModel,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &Rng,
    trace: &mut Vec<StepTrace>,
) -> Result<Vec<ImageTensor>> {
    let mut rngs: Vec<Rng> = (0..cfg.samples as u64).map(|j| rng.split(j)).collect();
    run_chains(obs, model, schedule, cfg, &mut rngs, Some(trace))
}
