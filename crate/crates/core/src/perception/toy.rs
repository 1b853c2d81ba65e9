use mdps_nn::{ConvSpec, Graph, ParamStore, Tensor};

use super::FeatureBackbone;
use crate::{Error, ImageTensor, Result, Rng};

const TOY_WIDTHS: [usize; 3] = [16, 32, 64];
const TOY_SEED: u64 = 0x70_79;

/// Three strided 3x3 convolutions with ReLU and fixed random weights.
///
/// Needs no download and is bit-for-bit reproducible, which makes it the
/// backbone for small-scale runs and tests.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    params: ParamStore,
}

impl ToyBackbone {
    pub fn new() -> Self {
        let mut rng = Rng::new(TOY_SEED);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &cout) in TOY_WIDTHS.iter().enumerate() {
            params
                .insert_kaiming(format!("stage{i}.weight"), [cout, cin, 3, 3], 1.0, &mut rng)
                .expect("unique names");
            cin = cout;
        }
        Self { params }
    }
}

impl Default for ToyBackbone {
    fn default() -> Self {
        Self::new()
    }
}

/// `[1, 3, H, W]` batch in `[0, 1]`; single-channel images are replicated.
pub(crate) fn rgb_batch(img: &ImageTensor) -> Result<Tensor> {
    let img = img.to_unit();
    let [c, h, w] = img.shape();
    match c {
        3 => Ok(img.to_batch()),
        1 => Ok(Tensor::from_vec([1, 3, h, w], img.data().repeat(3))?),
        _ => Err(Error::Shape(format!("backbones take 1 or 3 channels, got {c}"))),
    }
}

impl FeatureBackbone for ToyBackbone {
    fn name(&self) -> String {
        "toy".into()
    }

    fn num_stages(&self) -> usize {
        TOY_WIDTHS.len()
    }

    fn extract(&self, img: &ImageTensor) -> Result<Vec<Tensor>> {
        let x = rgb_batch(img)?.map(|v| 2.0 * v - 1.0);
        let mut g = Graph::new(&self.params, false);
        let mut h = g.input(x, false);
        let mut out = Vec::with_capacity(TOY_WIDTHS.len());
        for i in 0..TOY_WIDTHS.len() {
            let w = g.param_named(&format!("stage{i}.weight"))?;
            h = g.conv2d(h, w, None, ConvSpec::strided(2, 1))?;
            h = g.relu(h);
            out.push(g.value(h).clone());
        }
        Ok(out)
    }
}

/// A single stage whose features are the raw pixel values.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackbone;

impl FeatureBackbone for IdentityBackbone {
    fn name(&self) -> String {
        "identity".into()
    }

    fn num_stages(&self) -> usize {
        1
    }

    fn extract(&self, img: &ImageTensor) -> Result<Vec<Tensor>> {
        Ok(vec![img.to_unit().to_batch()])
    }
}
