use std::collections::HashMap;
use std::path::Path;

use mdps_nn::{ConvSpec, Graph, ParamStore, Tensor, Var};
use safetensors::tensor::{Dtype, SafeTensors};

use super::toy::rgb_batch;
use super::FeatureBackbone;
use crate::{Error, ImageTensor, Result, Rng};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
const BN_EPS: f64 = 1e-5;

/// Shape of a bottleneck ResNet truncated after its third residual stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetSpec {
    /// Bottleneck blocks in `layer1..layer3`.
    pub blocks: [usize; 3],
    /// Inner width of `layer1` bottlenecks; 64 for ResNet, 128 for the wide variant.
    pub base_width: usize,
}

impl ResNetSpec {
    pub const RESNET101: Self = Self {
        blocks: [3, 4, 23],
        base_width: 64,
    };
    pub const WIDE_RESNET101: Self = Self {
        blocks: [3, 4, 23],
        base_width: 128,
    };

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        // (layer index, blocks, inner width, output channels)
        [64usize, 128, 256].into_iter().enumerate().map(move |(i, planes)| {
            (i + 1, self.blocks[i], planes * self.base_width / 64, planes * 4)
        })
    }

    /// Every tensor the truncated network reads, with its shape.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("conv1.weight".to_string(), vec![64, 3, 7, 7])];
        bn_shapes(&mut out, "bn1", 64);
        let mut cin = 64;
        for (layer, blocks, width, cout) in self.layers() {
            for b in 0..blocks {
                let p = format!("layer{layer}.{b}");
                out.push((format!("{p}.conv1.weight"), vec![width, cin, 1, 1]));
                bn_shapes(&mut out, &format!("{p}.bn1"), width);
                out.push((format!("{p}.conv2.weight"), vec![width, width, 3, 3]));
                bn_shapes(&mut out, &format!("{p}.bn2"), width);
                out.push((format!("{p}.conv3.weight"), vec![cout, width, 1, 1]));
                bn_shapes(&mut out, &format!("{p}.bn3"), cout);
                if b == 0 {
                    out.push((format!("{p}.downsample.0.weight"), vec![cout, cin, 1, 1]));
                    bn_shapes(&mut out, &format!("{p}.downsample.1"), cout);
                }
                cin = cout;
            }
        }
        out
    }
}

fn bn_shapes(out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize) {
    for part in ["weight", "bias", "running_mean", "running_var"] {
        out.push((format!("{name}.{part}"), vec![c]));
    }
}

/// Frozen-batch-norm ResNet returning the outputs of `layer1..layer3`.
#[derive(Debug, Clone)]
pub struct ResNetBackbone {
    name: String,
    spec: ResNetSpec,
    convs: ParamStore,
    norms: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl ResNetBackbone {
    /// Builds the network from named tensors; extra tensors are ignored.
    pub fn from_tensors(name: &str, spec: ResNetSpec, mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<Self> {
        let mut take = |key: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, data) = tensors
                .remove(key)
                .ok_or_else(|| Error::Checkpoint(format!("backbone weights lack `{key}`")))?;
            if s != shape {
                return Err(Error::Checkpoint(format!(
                    "backbone tensor `{key}` has shape {s:?}, expected {shape:?}"
                )));
            }
            Ok(data)
        };
        let mut convs = ParamStore::new();
        let mut raw_bn: HashMap<String, Vec<f32>> = HashMap::new();
        for (key, shape) in spec.tensor_shapes() {
            let data = take(&key, &shape)?;
            if shape.len() == 4 {
                let dims = [shape[0], shape[1], shape[2], shape[3]];
                convs.insert(key.trim_end_matches(".weight"), Tensor::from_vec(dims, data)?)?;
            } else {
                raw_bn.insert(key, data);
            }
        }
        let mut norms = HashMap::new();
        let bn_names: Vec<String> = raw_bn
            .keys()
            .filter_map(|k| k.strip_suffix(".running_var").map(str::to_string))
            .collect();
        for bn in bn_names {
            let get = |part: &str| raw_bn[&format!("{bn}.{part}")].clone();
            let (gamma, beta, mean, var) = (get("weight"), get("bias"), get("running_mean"), get("running_var"));
            let scale: Vec<f32> = gamma
                .iter()
                .zip(&var)
                .map(|(&g, &v)| (g as f64 / (v as f64 + BN_EPS).sqrt()) as f32)
                .collect();
            let shift = beta
                .iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((&b, &m), &s)| b - m * s)
                .collect();
            norms.insert(bn, (scale, shift));
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            convs,
            norms,
        })
    }

    /// Loads f32 weights in the torchvision naming scheme.
    pub fn from_safetensors(name: &str, spec: ResNetSpec, path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&buf)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut tensors = HashMap::new();
        for (key, _) in spec.tensor_shapes() {
            let view = match st.tensor(&key) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let data: Vec<f32> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "backbone tensor `{key}` has dtype {other:?}, expected F32"
                    )))
                }
            };
            tensors.insert(key, (view.shape().to_vec(), data));
        }
        Self::from_tensors(name, spec, tensors)
    }

    /// Random weights with identity batch-norm statistics.
    pub fn random(name: &str, spec: ResNetSpec, rng: &mut Rng) -> Self {
        let tensors = spec
            .tensor_shapes()
            .into_iter()
            .map(|(key, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let std = (2.0 / fan_in).sqrt();
                    rng.normal_vec(n).into_iter().map(|v| v * std).collect()
                } else if key.ends_with("running_mean") || key.ends_with("bias") {
                    vec![0.0; n]
                } else {
                    vec![1.0; n]
                };
                (key, (shape, data))
            })
            .collect();
        Self::from_tensors(name, spec, tensors).expect("tensor shapes follow the architecture")
    }

    pub fn spec(&self) -> ResNetSpec {
        self.spec
    }

    fn conv_bn(&self, g: &mut Graph<'_>, x: Var, conv: &str, bn: &str, spec: ConvSpec, relu: bool) -> Result<Var> {
        let w = g.param_named(conv)?;
        let h = g.conv2d(x, w, None, spec)?;
        let (scale, shift) = &self.norms[bn];
        let h = g.channel_affine(h, scale, shift)?;
        Ok(if relu { g.relu(h) } else { h })
    }
}

impl FeatureBackbone for ResNetBackbone {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn num_stages(&self) -> usize {
        3
    }

    fn extract(&self, img: &ImageTensor) -> Result<Vec<Tensor>> {
        let mut x = rgb_batch(img)?;
        let hw = x.height() * x.width();
        for (c, chunk) in x.data_mut().chunks_mut(hw).enumerate() {
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
        let mut g = Graph::new(&self.convs, false);
        let x = g.input(x, false);
        let h = self.conv_bn(&mut g, x, "conv1", "bn1", ConvSpec::strided(2, 3), true)?;
        let mut h = g.max_pool(h, 3, 2, 1)?;
        let mut out = Vec::with_capacity(3);
        for (layer, blocks, _, _) in self.spec.layers() {
            for b in 0..blocks {
                let p = format!("layer{layer}.{b}");
                let stride = if b == 0 && layer > 1 { 2 } else { 1 };
                let a = self.conv_bn(&mut g, h, &format!("{p}.conv1"), &format!("{p}.bn1"), ConvSpec::same(1), true)?;
                let a = self.conv_bn(&mut g, a, &format!("{p}.conv2"), &format!("{p}.bn2"), ConvSpec::strided(stride, 1), true)?;
                let a = self.conv_bn(&mut g, a, &format!("{p}.conv3"), &format!("{p}.bn3"), ConvSpec::same(1), false)?;
                let skip = if b == 0 {
                    self.conv_bn(
                        &mut g,
                        h,
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        ConvSpec::strided(stride, 0),
                        false,
                    )?
                } else {
                    h
                };
                let sum = g.add(a, skip)?;
                h = g.relu(sum);
            }
            out.push(g.value(h).clone());
        }
        Ok(out)
    }
}
