//! Discrete noise schedule and the forward noising map.

use serde::{Deserialize, Serialize};

use crate::{Error, ImageTensor, Result, Rng, ValueRange};

/// Parameters a schedule is rebuilt from (stored in checkpoints).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta schedule with cumulative products `alpha_bar[t]`, `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidArgument("t_max must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        for beta in &betas {
            let prev = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(prev * (1.0 - beta));
        }
        Ok(Self {
            params: ScheduleParams {
                t_max,
                beta_start,
                beta_end,
            },
            betas,
            alpha_bars,
        })
    }

    pub fn from_params(params: ScheduleParams) -> Result<Self> {
        Self::linear(params.t_max, params.beta_start, params.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn t_max(&self) -> usize {
        self.params.t_max
    }

    /// `beta(t)` for `1 <= t <= t_max`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal retention; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} exceeds t_max {}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Standard deviation of the fresh noise in the reverse step `t -> s`.
    pub fn sigma(&self, s: usize, t: usize) -> Result<f64> {
        if s >= t {
            return Err(Error::InvalidArgument(format!(
                "reverse step needs s < t, got s={s}, t={t}"
            )));
        }
        self.check_t(t)?;
        Ok(sigma_from(self.alpha_bar(s), self.alpha_bar(t)))
    }

    /// Noises `x0` to level `t`; returns `(x_t, eps)`.
    pub fn forward_noise(
        &self,
        x0: &ImageTensor,
        t: usize,
        rng: &mut Rng,
    ) -> Result<(ImageTensor, ImageTensor)> {
        self.check_t(t)?;
        let [c, h, w] = x0.shape();
        let eps = ImageTensor::new(c, h, w, rng.normal_vec(c * h * w), ValueRange::Unbounded)?;
        let xt = self.forward_noise_with(x0, t, &eps)?;
        Ok((xt, eps))
    }

    /// Forward noising with a caller-supplied `eps`.
    pub fn forward_noise_with(&self, x0: &ImageTensor, t: usize, eps: &ImageTensor) -> Result<ImageTensor> {
        self.check_t(t)?;
        x0.check_same_shape(eps, "forward_noise")?;
        let [c, h, w] = x0.shape();
        if t == 0 {
            return ImageTensor::new(c, h, w, x0.data().to_vec(), ValueRange::Unbounded);
        }
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| sa * x + sn * e)
            .collect();
        ImageTensor::new(c, h, w, data, ValueRange::Unbounded)
    }
}

/// `sigma_t` from the two cumulative products, zero for the degenerate cases.
pub fn sigma_from(alpha_bar_s: f64, alpha_bar_t: f64) -> f64 {
    if alpha_bar_s >= 1.0 || alpha_bar_t >= 1.0 {
        return 0.0;
    }
    let ratio = ((1.0 - alpha_bar_s) / (1.0 - alpha_bar_t)).max(0.0);
    let decay = (1.0 - alpha_bar_t / alpha_bar_s).max(0.0);
    ratio.sqrt() * decay.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_schedule_is_hand_product() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(2), 0.25);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.t_max() {
            let b = s.beta(t);
            assert!(b > 0.0 && b < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
            let rel = (s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - b)).abs() / s.alpha_bar(t);
            assert!(rel <= 1e-12);
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_from(0.5, 0.5), 0.0);
        assert_eq!(sigma_from(1.0, 0.5), 0.0);
        // sqrt(0.1 / 0.5) * sqrt(1 - 0.5 / 0.9)
        let expected = (0.2f64).sqrt() * (1.0f64 - 5.0 / 9.0).sqrt();
        assert!((sigma_from(0.9, 0.5) - expected).abs() < 1e-15);
        assert!((sigma_from(0.9, 0.5) - 0.2981).abs() < 1e-4);
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        assert!(s.sigma(5, 5).is_err());
        assert_eq!(s.sigma(0, 3).unwrap(), 0.0);
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let x0 = ImageTensor::new(1, 2, 2, vec![0.1, -0.3, 0.7, 1.0], ValueRange::Symmetric).unwrap();
        let (xt, _) = s.forward_noise(&x0, 0, &mut Rng::new(1)).unwrap();
        assert_eq!(xt.data(), x0.data());

        // alpha_bar(1) = 0.5 with beta = 0.5
        let half = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let zeros = ImageTensor::filled(1, 2, 2, 0.0, ValueRange::Symmetric).unwrap();
        let ones = ImageTensor::filled(1, 2, 2, 1.0, ValueRange::Unbounded).unwrap();
        let xt = half.forward_noise_with(&zeros, 1, &ones).unwrap();
        assert!(xt.data().iter().all(|v| (v - 0.70711).abs() < 1e-5));

        let none = ImageTensor::filled(1, 2, 2, 0.0, ValueRange::Unbounded).unwrap();
        let xt = s.forward_noise_with(&x0, 3, &none).unwrap();
        let sa = s.alpha_bar(3).sqrt() as f32;
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*a, sa * b);
        }
    }

    #[test]
    fn forward_noise_inverts_and_is_deterministic() {
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        let x0 = ImageTensor::new(3, 4, 4, (0..48).map(|i| (i as f32 / 24.0) - 1.0).collect(), ValueRange::Symmetric).unwrap();
        // Near t_max the 1/sqrt(alpha_bar) factor amplifies f32 rounding of x_t
        // beyond 1e-5, so the check covers the sampler's working range.
        for t in [1, 100, 200, 500] {
            let (xt, eps) = s.forward_noise(&x0, t, &mut Rng::new(t as u64)).unwrap();
            let a = s.alpha_bar(t);
            for ((x, e), orig) in xt.data().iter().zip(eps.data()).zip(x0.data()) {
                let rec = (*x as f64 - (1.0 - a).sqrt() * *e as f64) / a.sqrt();
                assert!((rec - *orig as f64).abs() <= 1e-5);
            }
            let (_, eps2) = s.forward_noise(&x0, t, &mut Rng::new(t as u64)).unwrap();
            assert_eq!(eps, eps2);
        }
    }
}
