//! Noise-prediction denoisers, their training objective and the DDIM
//! reverse step.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use net::{timestep_embedding, Architecture, CompactConfig, NetDenoiser, UNetConfig};

use mdps_nn::{AdamW, AdamWConfig, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::schedule::sigma_from;
use crate::{Error, ImageTensor, NoiseSchedule, Result, Rng, ValueRange};

/// A noise predictor `eps_theta(x_t, t)` over batches `[B, C, H, W]`.
///
/// Implementations must be deterministic and element-wise identical whether
/// an input is evaluated alone or inside a batch.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> String;

    /// Predicted noise for every batch item; `t` holds one timestep per item.
    fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;

    /// Predicted noise together with the vector-Jacobian product `J^T c`,
    /// where `c` is produced from the prediction by `cotangent`.
    fn predict_with_vjp(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cotangent: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let _ = (x_t, t, cotangent);
        Err(Error::GradientUnavailable(self.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 5e-2,
            t_max: 1000,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.batch_size == 0 || self.t_max == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and t_max must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidArgument("grad_clip must be positive".into()));
        }
        if self.t_max > schedule.t_max() {
            return Err(Error::InvalidArgument(format!(
                "t_max {} exceeds the schedule's {}",
                self.t_max,
                schedule.t_max()
            )));
        }
        Ok(())
    }
}

/// Coefficients of one reverse step from `t` to `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub alpha_bar_t: f64,
    pub alpha_bar_s: f64,
    pub sigma: f64,
    direction: f64,
}

impl DdimCoefficients {
    /// Uses the DDIM variance `sigma_t` for the pair.
    pub fn new(alpha_bar_t: f64, alpha_bar_s: f64) -> Result<Self> {
        Self::with_sigma(alpha_bar_t, alpha_bar_s, sigma_from(alpha_bar_s, alpha_bar_t))
    }

    pub fn with_sigma(alpha_bar_t: f64, alpha_bar_s: f64, sigma: f64) -> Result<Self> {
        let valid = |a: f64| a > 0.0 && a <= 1.0;
        if !valid(alpha_bar_t) || !valid(alpha_bar_s) || !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid step coefficients alpha_bar_t={alpha_bar_t}, alpha_bar_s={alpha_bar_s}, sigma={sigma}"
            )));
        }
        let radicand = 1.0 - alpha_bar_s - sigma * sigma;
        // Rounding can leave a tiny negative value when alpha_bar_s = 1.
        if radicand < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "negative radicand {radicand} in the direction term (alpha_bar_s={alpha_bar_s}, sigma={sigma})"
            )));
        }
        Ok(Self {
            alpha_bar_t,
            alpha_bar_s,
            sigma,
            direction: radicand.max(0.0).sqrt(),
        })
    }

    pub fn from_schedule(schedule: &NoiseSchedule, t: usize, s: usize) -> Result<Self> {
        schedule.check_t(t)?;
        if s >= t {
            return Err(Error::InvalidArgument(format!("need s < t, got s={s}, t={t}")));
        }
        Self::with_sigma(
            schedule.alpha_bar(t),
            schedule.alpha_bar(s),
            schedule.sigma(s, t)?,
        )
    }

    /// `sqrt(1 - alpha_bar_s - sigma^2)`.
    pub fn direction(&self) -> f64 {
        self.direction
    }
}

fn check_len(a: &[f32], b: &[f32], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// `(x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn predict_x0(x_t: &[f32], eps: &[f32], alpha_bar_t: f64) -> Result<Vec<f32>> {
    check_len(x_t, eps, "x_t and eps")?;
    let a = alpha_bar_t.sqrt();
    let b = (1.0 - alpha_bar_t).sqrt();
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32)
        .collect())
}

/// `sqrt(alpha_bar_s) x0 + sqrt(1 - alpha_bar_s - sigma^2) eps + sigma noise`.
pub fn recombine(x0: &[f32], eps: &[f32], noise: &[f32], c: &DdimCoefficients) -> Result<Vec<f32>> {
    check_len(x0, eps, "x0 and eps")?;
    check_len(x0, noise, "x0 and noise")?;
    let a = c.alpha_bar_s.sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .zip(noise)
        .map(|((&x, &e), &z)| (a * x as f64 + c.direction * e as f64 + c.sigma * z as f64) as f32)
        .collect())
}

/// The reverse step written as a single expression in `x_t`.
pub fn ddim_update(x_t: &[f32], eps: &[f32], noise: &[f32], c: &DdimCoefficients) -> Result<Vec<f32>> {
    check_len(x_t, eps, "x_t and eps")?;
    check_len(x_t, noise, "x_t and noise")?;
    let ratio = (c.alpha_bar_s / c.alpha_bar_t).sqrt();
    let b = (1.0 - c.alpha_bar_t).sqrt();
    Ok(x_t
        .iter()
        .zip(eps)
        .zip(noise)
        .map(|((&x, &e), &z)| {
            let e = e as f64;
            (ratio * (x as f64 - b * e) + c.direction * e + c.sigma * z as f64) as f32
        })
        .collect())
}

/// The same update computed through the clean-image estimate.
pub fn ddim_update_via_x0(x_t: &[f32], eps: &[f32], noise: &[f32], c: &DdimCoefficients) -> Result<Vec<f32>> {
    let x0 = predict_x0(x_t, eps, c.alpha_bar_t)?;
    recombine(&x0, eps, noise, c)
}

fn step_image(
    x_t: &ImageTensor,
    t: usize,
    s: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    update: fn(&[f32], &[f32], &[f32], &DdimCoefficients) -> Result<Vec<f32>>,
) -> Result<ImageTensor> {
    x_t.check_same_shape(eps_hat, "x_t and eps_hat")?;
    let c = DdimCoefficients::from_schedule(schedule, t, s)?;
    let noise = rng.normal_vec(x_t.data().len());
    let out = update(x_t.data(), eps_hat.data(), &noise, &c)?;
    let [ch, h, w] = x_t.shape();
    ImageTensor::new(ch, h, w, out, ValueRange::Unbounded)
}

/// One stochastic DDIM step from `t` to `s` with fresh noise from `rng`.
pub fn ddim_step(
    x_t: &ImageTensor,
    t: usize,
    s: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    step_image(x_t, t, s, eps_hat, schedule, rng, ddim_update)
}

/// [`ddim_step`] computed via the clean-image estimate; draws the same noise.
pub fn ddim_step_via_x0(
    x_t: &ImageTensor,
    t: usize,
    s: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    step_image(x_t, t, s, eps_hat, schedule, rng, ddim_update_via_x0)
}

/// Clean-image estimate from the denoiser's own noise prediction.
pub fn estimate_x0_prior(
    x_t: &ImageTensor,
    t: usize,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument("t must be at least 1".into()));
    }
    let eps = model.predict(&x_t.to_batch(), &[t])?;
    let x0 = predict_x0(x_t.data(), eps.data(), schedule.alpha_bar(t))?;
    let [c, h, w] = x_t.shape();
    ImageTensor::new(c, h, w, x0, ValueRange::Unbounded)
}

/// Unguided DDIM reconstruction: noise `y` to level `t_start`, then denoise in
/// `steps` equal strides.
pub fn ddim_sample(
    y: &ImageTensor,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    t_start: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    if steps == 0 || t_start == 0 || t_start % steps != 0 {
        return Err(Error::InvalidArgument(format!(
            "t_start={t_start} must be a positive multiple of steps={steps}"
        )));
    }
    schedule.check_t(t_start)?;
    let y = y.to_model_space();
    let mut x = noised_start(y.data(), schedule.alpha_bar(t_start), rng);
    let [c, h, w] = y.shape();
    for n in (1..=steps).rev() {
        let (t, s) = (t_start * n / steps, t_start * (n - 1) / steps);
        let batch = Tensor::from_vec([1, c, h, w], x)?;
        let eps = model.predict(&batch, &[t])?;
        x = reverse_step(batch.data(), eps.data(), schedule, t, s, rng)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "ddim_sample".into(),
                step: n,
            });
        }
    }
    finish_sample(c, h, w, x, y.range())
}

pub(crate) fn noised_start(y: &[f32], alpha_bar: f64, rng: &mut Rng) -> Vec<f32> {
    let eps = rng.normal_vec(y.len());
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y.iter()
        .zip(&eps)
        .map(|(&v, &e)| (a * v as f64 + b * e as f64) as f32)
        .collect()
}

/// Shared two-stage reverse step used by every sampler.
pub(crate) fn reverse_step(
    x_t: &[f32],
    eps: &[f32],
    schedule: &NoiseSchedule,
    t: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    let c = DdimCoefficients::from_schedule(schedule, t, s)?;
    let noise = rng.normal_vec(x_t.len());
    ddim_update_via_x0(x_t, eps, &noise, &c)
}

pub(crate) fn finish_sample(c: usize, h: usize, w: usize, x: Vec<f32>, range: ValueRange) -> Result<ImageTensor> {
    let out = ImageTensor::new(c, h, w, x, ValueRange::Unbounded)?;
    Ok(match range {
        ValueRange::Unbounded => out,
        _ => out.clamp_to(ValueRange::Symmetric),
    })
}

/// Random timesteps and noise for one training batch.
pub fn draw_training_noise(x0_batch: &Tensor, t_max: usize, rng: &mut Rng) -> (Vec<usize>, Tensor) {
    let t: Vec<usize> = (0..x0_batch.batch()).map(|_| rng.int_in(1, t_max)).collect();
    let eps = Tensor::from_vec(x0_batch.shape(), rng.normal_vec(x0_batch.numel()))
        .expect("noise matches batch shape");
    (t, eps)
}

fn noisy_batch(x0_batch: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    x0_batch.check_same(eps, "x0 batch and noise")?;
    if t.len() != x0_batch.batch() {
        return Err(Error::Shape(format!(
            "{} timesteps for a batch of {}",
            t.len(),
            x0_batch.batch()
        )));
    }
    let mut x_t = x0_batch.clone();
    for (b, &step) in t.iter().enumerate() {
        schedule.check_t(step)?;
        let ab = schedule.alpha_bar(step);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (x, &e) in x_t.item_mut(b).iter_mut().zip(eps.item(b)) {
            *x = (a * *x as f64 + s * e as f64) as f32;
        }
    }
    Ok(x_t)
}

/// Element-wise mean squared noise-prediction error for given timesteps and noise.
pub fn training_loss_with(
    model: &dyn Denoiser,
    x0_batch: &Tensor,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if x0_batch.batch() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let x_t = noisy_batch(x0_batch, t, eps, schedule)?;
    let pred = model.predict(&x_t, t)?;
    pred.check_same(eps, "prediction and noise")?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| (p as f64 - e as f64).powi(2))
        .sum();
    Ok(sq / eps.numel() as f64)
}

/// Training objective with `t ~ U{1..T_max}` and `eps ~ N(0, I)` per image.
pub fn training_loss(
    model: &dyn Denoiser,
    x0_batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let (t, eps) = draw_training_noise(x0_batch, schedule.t_max(), rng);
    training_loss_with(model, x0_batch, &t, &eps, schedule)
}

/// Loss and parameter gradients of a network denoiser on one batch.
pub fn loss_and_grads(
    model: &NetDenoiser,
    x0_batch: &Tensor,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let x_t = noisy_batch(x0_batch, t, eps, schedule)?;
    let mut g = Graph::new(model.params(), true);
    let x = g.input(x_t, false);
    let out = model.forward(&mut g, x, t)?;
    let pred = g.value(out);
    let n = eps.numel() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| (p as f64 - e as f64).powi(2))
        .sum::<f64>()
        / n;
    let seed = pred.zip_map(eps, |p, e| (2.0 * (p as f64 - e as f64) / n) as f32)?;
    let grads = g.backward(out, seed)?;
    Ok((loss, grads.into_params()))
}

fn clip_grads(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.sum_squares())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
}

/// Fits `model` to a collection of normal images.
///
/// Images in `[0, 1]` are mapped to model space first. Returns the mean loss
/// of every epoch; `on_epoch` sees each value as it is produced.
pub fn train(
    model: &mut NetDenoiser,
    dataset: &[ImageTensor],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    config.validate(schedule)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let images: Vec<Tensor> = dataset.iter().map(|im| im.to_model_space().to_batch()).collect();
    if images.iter().any(|t| t.shape() != images[0].shape()) {
        return Err(Error::Shape("training images differ in shape".into()));
    }
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            learning_rate: config.learning_rate as f32,
            weight_decay: config.weight_decay as f32,
            ..Default::default()
        },
    );
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut bad_streak = 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.int_in(0, i));
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = Tensor::stack(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
            let (t, eps) = draw_training_noise(&batch, config.t_max, rng);
            let (loss, mut grads) = loss_and_grads(model, &batch, &t, &eps, schedule)?;
            if !loss.is_finite() {
                bad_streak += 1;
                if bad_streak >= 3 {
                    history.push(f64::NAN);
                    return Err(Error::Divergence { step, history });
                }
                continue;
            }
            bad_streak = 0;
            if let Some(max) = config.grad_clip {
                clip_grads(&mut grads, max);
            }
            opt.step(model.params_mut(), &grads);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}
