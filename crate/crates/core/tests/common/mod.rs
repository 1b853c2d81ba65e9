#![allow(dead_code)]

use mdps_core::diffusion::{Architecture, CompactConfig, Denoiser, NetDenoiser};
use mdps_core::{ImageTensor, NoiseSchedule, Result, Rng, ValueRange};
use mdps_nn::Tensor;

/// Predicts zero noise everywhere; its Jacobian is zero.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn name(&self) -> String {
        "zero".into()
    }

    fn predict(&self, x_t: &Tensor, _t: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }

    fn predict_with_vjp(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cotangent: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let eps = self.predict(x_t, t)?;
        cotangent(&eps)?;
        Ok((eps, Tensor::zeros(x_t.shape())))
    }
}

/// Returns a constant and offers no input gradients.
pub struct ConstDenoiser(pub f32);

impl Denoiser for ConstDenoiser {
    fn name(&self) -> String {
        "const".into()
    }

    fn predict(&self, x_t: &Tensor, _t: &[usize]) -> Result<Tensor> {
        Ok(Tensor::full(x_t.shape(), self.0))
    }
}

/// Recovers the exact forward noise for known clean images.
pub struct ExactNoise {
    pub x0: Tensor,
    pub alpha_bars: Vec<f64>,
}

impl Denoiser for ExactNoise {
    fn name(&self) -> String {
        "exact".into()
    }

    fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut out = x_t.clone();
        for (b, &step) in t.iter().enumerate() {
            let ab = self.alpha_bars[step];
            for (o, &x0) in out.item_mut(b).iter_mut().zip(self.x0.item(b)) {
                *o = ((*o as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32;
            }
        }
        Ok(out)
    }
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

pub fn random_image(c: usize, h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    let data = (0..c * h * w).map(|_| rng.range_f32(-1.0, 1.0)).collect();
    ImageTensor::new(c, h, w, data, ValueRange::Symmetric).unwrap()
}

/// A compact network whose output layer is randomised so it is not identically zero.
pub fn compact_net(channels: usize, seed: u64) -> NetDenoiser {
    let arch = Architecture::Compact(CompactConfig {
        in_channels: channels,
        hidden: 8,
        embed_dim: 16,
        dilations: vec![2, 4, 2],
    });
    let mut rng = Rng::new(seed);
    let mut net = NetDenoiser::new(arch, &mut rng).unwrap();
    let id = net.params().id("conv_out.weight").unwrap();
    let shape = net.params().get(id).shape();
    let n = shape.iter().product();
    let w = Tensor::from_vec(shape, rng.normal_vec(n).into_iter().map(|v| v * 0.1).collect()).unwrap();
    net.params_mut().set("conv_out.weight", w).unwrap();
    net
}
