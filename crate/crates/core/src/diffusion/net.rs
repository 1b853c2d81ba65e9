//! Trainable noise-prediction networks.
//!
//! Two backbones share one parameter store and one forward routine: a compact
//! dilated CNN for desk-scale runs, and an attention U-Net for full-resolution
//! categories.

use mdps_nn::{ConvSpec, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::{Error, Result, Rng};

/// Compact residual CNN with dilated 3x3 convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompactConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Dilations of the residual body; total conv count is `len + 2`.
    pub dilations: Vec<usize>,
}

impl Default for CompactConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden: 32,
            embed_dim: 64,
            dilations: vec![2, 4, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    /// Levels (0 = full resolution) that get a self-attention block.
    pub attention_levels: Vec<usize>,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 64,
            channel_mult: vec![1, 1, 2, 2, 4],
            num_res_blocks: 2,
            attention_levels: vec![3, 4],
            groups: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Compact(CompactConfig),
    Unet(UNetConfig),
}

impl Architecture {
    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::Compact(c) => c.in_channels,
            Architecture::Unet(c) => c.in_channels,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self {
            Architecture::Compact(c) => {
                if c.in_channels == 0 || c.hidden == 0 || c.embed_dim < 2 || c.embed_dim % 2 != 0 {
                    return bad(format!("invalid compact denoiser config {c:?}"));
                }
                if c.dilations.len() > 3 || c.dilations.iter().any(|&d| d == 0) {
                    return bad("compact denoiser allows at most 3 body convolutions with positive dilation".into());
                }
            }
            Architecture::Unet(c) => {
                if c.in_channels == 0 || c.base_channels == 0 || c.channel_mult.is_empty() || c.num_res_blocks == 0 {
                    return bad(format!("invalid U-Net config {c:?}"));
                }
                for m in &c.channel_mult {
                    if (c.base_channels * m) % c.groups != 0 {
                        return bad(format!(
                            "{} channels are not divisible into {} groups",
                            c.base_channels * m,
                            c.groups
                        ));
                    }
                }
                if c.base_channels % 2 != 0 {
                    return bad("U-Net base channels must be even".into());
                }
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps as a `[B, dim, 1, 1]` tensor.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let step = step as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f32>, Vec<f32>) = freqs
            .map(|f| ((step * f).sin() as f32, (step * f).cos() as f32))
            .unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::from_vec([t.len(), dim, 1, 1], data).expect("embedding shape")
}

/// A network denoiser: architecture descriptor plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetDenoiser {
    arch: Architecture,
    params: ParamStore,
}

impl NetDenoiser {
    /// Freshly initialised weights.
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut init = Init {
            params: ParamStore::new(),
            rng,
        };
        match &arch {
            Architecture::Compact(c) => init_compact(&mut init, c)?,
            Architecture::Unet(c) => init_unet(&mut init, c)?,
        }
        Ok(Self {
            arch,
            params: init.params,
        })
    }

    /// Wraps existing weights; every parameter the architecture expects must be present.
    pub fn from_params(arch: Architecture, params: ParamStore) -> Result<Self> {
        let reference = Self::new(arch.clone(), &mut Rng::new(0))?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in reference.params.iter() {
            let id = params
                .id(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    params.get(id).shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the forward pass on `g` and returns the predicted noise.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, t: &[usize]) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape[0] != t.len() {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {}",
                t.len(),
                shape[0]
            )));
        }
        if shape[1] != self.arch.in_channels() {
            return Err(Error::Shape(format!(
                "denoiser expects {} channels, got {}",
                self.arch.in_channels(),
                shape[1]
            )));
        }
        match &self.arch {
            Architecture::Compact(c) => forward_compact(g, c, x, t),
            Architecture::Unet(c) => forward_unet(g, c, x, t),
        }
    }
}

impl Denoiser for NetDenoiser {
    fn name(&self) -> String {
        match &self.arch {
            Architecture::Compact(_) => "compact-cnn".into(),
            Architecture::Unet(_) => "unet".into(),
        }
    }

    fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false);
        let x = g.input(x_t.clone(), false);
        let out = self.forward(&mut g, x, t)?;
        Ok(g.value(out).clone())
    }

    fn predict_with_vjp(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cotangent: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.params, false);
        let x = g.input(x_t.clone(), true);
        let out = self.forward(&mut g, x, t)?;
        let eps = g.value(out).clone();
        let seed = cotangent(&eps)?;
        let mut grads = g.backward(out, seed)?;
        let input_grad = grads
            .take(x)
            .unwrap_or_else(|| Tensor::zeros(x_t.shape()));
        Ok((eps, input_grad))
    }
}

struct Init<'r> {
    params: ParamStore,
    rng: &'r mut Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> Result<()> {
        if zero {
            self.params
                .insert(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]))?;
        } else {
            self.params
                .insert_kaiming(format!("{name}.weight"), [cout, cin, k, k], 1.0, self.rng)?;
        }
        self.params
            .insert(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?;
        Ok(())
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.params
            .insert(format!("{name}.weight"), Tensor::full([1, c, 1, 1], 1.0))?;
        self.params
            .insert(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1]))?;
        Ok(())
    }
}

fn conv(g: &mut Graph<'_>, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = g.param_named(&format!("{name}.weight"))?;
    let b = g.param_named(&format!("{name}.bias"))?;
    Ok(g.conv2d(x, w, Some(b), spec)?)
}

fn norm(g: &mut Graph<'_>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let gamma = g.param_named(&format!("{name}.weight"))?;
    let beta = g.param_named(&format!("{name}.bias"))?;
    Ok(g.group_norm(x, gamma, beta, groups)?)
}

fn time_mlp(g: &mut Graph<'_>, t: &[usize], dim: usize) -> Result<Var> {
    let emb = g.input(timestep_embedding(t, dim), false);
    let h = conv(g, "time.0", emb, ConvSpec::same(1))?;
    let h = g.silu(h);
    conv(g, "time.1", h, ConvSpec::same(1))
}

fn init_compact(init: &mut Init<'_>, c: &CompactConfig) -> Result<()> {
    init.conv("time.0", c.hidden, c.embed_dim, 1, false)?;
    init.conv("time.1", c.hidden, c.hidden, 1, false)?;
    init.conv("conv_in", c.hidden, c.in_channels, 3, false)?;
    for i in 0..c.dilations.len() {
        init.conv(&format!("body.{i}.emb"), c.hidden, c.hidden, 1, false)?;
        init.conv(&format!("body.{i}.conv"), c.hidden, c.hidden, 3, false)?;
    }
    init.conv("conv_out", c.in_channels, c.hidden, 3, true)
}

fn forward_compact(g: &mut Graph<'_>, c: &CompactConfig, x: Var, t: &[usize]) -> Result<Var> {
    let emb = time_mlp(g, t, c.embed_dim)?;
    let emb = g.silu(emb);
    let mut h = conv(g, "conv_in", x, ConvSpec::same(3))?;
    for (i, &d) in c.dilations.iter().enumerate() {
        let e = conv(g, &format!("body.{i}.emb"), emb, ConvSpec::same(1))?;
        let a = g.add_channel(h, e)?;
        let a = g.silu(a);
        let a = conv(g, &format!("body.{i}.conv"), a, ConvSpec::dilated(3, d))?;
        h = g.add(h, a)?;
    }
    let h = g.silu(h);
    conv(g, "conv_out", h, ConvSpec::same(3))
}

fn init_res_block(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, temb: usize) -> Result<()> {
    init.norm(&format!("{name}.norm1"), cin)?;
    init.conv(&format!("{name}.conv1"), cout, cin, 3, false)?;
    init.conv(&format!("{name}.emb"), cout, temb, 1, false)?;
    init.norm(&format!("{name}.norm2"), cout)?;
    init.conv(&format!("{name}.conv2"), cout, cout, 3, true)?;
    if cin != cout {
        init.conv(&format!("{name}.skip"), cout, cin, 1, false)?;
    }
    Ok(())
}

fn res_block(g: &mut Graph<'_>, name: &str, x: Var, emb: Var, groups: usize) -> Result<Var> {
    let h = norm(g, &format!("{name}.norm1"), x, groups)?;
    let h = g.silu(h);
    let h = conv(g, &format!("{name}.conv1"), h, ConvSpec::same(3))?;
    let e = conv(g, &format!("{name}.emb"), emb, ConvSpec::same(1))?;
    let h = g.add_channel(h, e)?;
    let h = norm(g, &format!("{name}.norm2"), h, groups)?;
    let h = g.silu(h);
    let h = conv(g, &format!("{name}.conv2"), h, ConvSpec::same(3))?;
    let skip_name = format!("{name}.skip");
    let skip = if g.params().id(&format!("{skip_name}.weight")).is_ok() {
        conv(g, &skip_name, x, ConvSpec::same(1))?
    } else {
        x
    };
    Ok(g.add(skip, h)?)
}

fn init_attention(init: &mut Init<'_>, name: &str, c: usize) -> Result<()> {
    init.norm(&format!("{name}.norm"), c)?;
    for part in ["q", "k", "v"] {
        init.conv(&format!("{name}.{part}"), c, c, 1, false)?;
    }
    init.conv(&format!("{name}.proj"), c, c, 1, true)
}

fn attention_block(g: &mut Graph<'_>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let h = norm(g, &format!("{name}.norm"), x, groups)?;
    let q = conv(g, &format!("{name}.q"), h, ConvSpec::same(1))?;
    let k = conv(g, &format!("{name}.k"), h, ConvSpec::same(1))?;
    let v = conv(g, &format!("{name}.v"), h, ConvSpec::same(1))?;
    let a = g.attention(q, k, v)?;
    let a = conv(g, &format!("{name}.proj"), a, ConvSpec::same(1))?;
    Ok(g.add(x, a)?)
}

fn init_unet(init: &mut Init<'_>, c: &UNetConfig) -> Result<()> {
    let temb = 4 * c.base_channels;
    init.conv("time.0", temb, c.base_channels, 1, false)?;
    init.conv("time.1", temb, temb, 1, false)?;
    init.conv("conv_in", c.base_channels, c.in_channels, 3, false)?;
    let mut skips = vec![c.base_channels];
    let mut ch = c.base_channels;
    let levels = c.channel_mult.len();
    for (level, mult) in c.channel_mult.iter().enumerate() {
        let out = c.base_channels * mult;
        for i in 0..c.num_res_blocks {
            init_res_block(init, &format!("down.{level}.{i}"), ch, out, temb)?;
            ch = out;
            if c.attention_levels.contains(&level) {
                init_attention(init, &format!("down.{level}.{i}.attn"), ch)?;
            }
            skips.push(ch);
        }
        if level + 1 < levels {
            init.conv(&format!("down.{level}.downsample"), ch, ch, 3, false)?;
            skips.push(ch);
        }
    }
    init_res_block(init, "mid.0", ch, ch, temb)?;
    init_attention(init, "mid.attn", ch)?;
    init_res_block(init, "mid.1", ch, ch, temb)?;
    for (level, mult) in c.channel_mult.iter().enumerate().rev() {
        let out = c.base_channels * mult;
        for i in 0..=c.num_res_blocks {
            let skip = skips.pop().expect("skip stack");
            init_res_block(init, &format!("up.{level}.{i}"), ch + skip, out, temb)?;
            ch = out;
            if c.attention_levels.contains(&level) {
                init_attention(init, &format!("up.{level}.{i}.attn"), ch)?;
            }
        }
        if level > 0 {
            init.conv(&format!("up.{level}.upsample"), ch, ch, 3, false)?;
        }
    }
    init.norm("out.norm", ch)?;
    init.conv("out.conv", c.in_channels, ch, 3, true)
}

fn forward_unet(g: &mut Graph<'_>, c: &UNetConfig, x: Var, t: &[usize]) -> Result<Var> {
    let levels = c.channel_mult.len();
    let factor = 1usize << (levels - 1);
    let [_, _, h, w] = g.value(x).shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "U-Net with {levels} levels needs sides divisible by {factor}, got {h}x{w}"
        )));
    }
    let emb = time_mlp(g, t, c.base_channels)?;
    let mut hv = conv(g, "conv_in", x, ConvSpec::same(3))?;
    let mut skips = vec![hv];
    for level in 0..levels {
        for i in 0..c.num_res_blocks {
            hv = res_block(g, &format!("down.{level}.{i}"), hv, emb, c.groups)?;
            if c.attention_levels.contains(&level) {
                hv = attention_block(g, &format!("down.{level}.{i}.attn"), hv, c.groups)?;
            }
            skips.push(hv);
        }
        if level + 1 < levels {
            hv = conv(g, &format!("down.{level}.downsample"), hv, ConvSpec::strided(2, 1))?;
            skips.push(hv);
        }
    }
    hv = res_block(g, "mid.0", hv, emb, c.groups)?;
    hv = attention_block(g, "mid.attn", hv, c.groups)?;
    hv = res_block(g, "mid.1", hv, emb, c.groups)?;
    for level in (0..levels).rev() {
        for i in 0..=c.num_res_blocks {
            let skip = skips.pop().expect("skip stack");
            let cat = g.concat(hv, skip)?;
            hv = res_block(g, &format!("up.{level}.{i}"), cat, emb, c.groups)?;
            if c.attention_levels.contains(&level) {
                hv = attention_block(g, &format!("up.{level}.{i}.attn"), hv, c.groups)?;
            }
        }
        if level > 0 {
            let up = g.upsample2x(hv);
            hv = conv(g, &format!("up.{level}.upsample"), up, ConvSpec::same(3))?;
        }
    }
    let out = norm(g, "out.norm", hv, c.groups)?;
    let out = g.silu(out);
    conv(g, "out.conv", out, ConvSpec::same(3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_unet() -> Architecture {
        Architecture::Unet(UNetConfig {
            in_channels: 3,
            base_channels: 8,
            channel_mult: vec![1, 2],
            num_res_blocks: 1,
            attention_levels: vec![1],
            groups: 4,
        })
    }

    #[test]
    fn outputs_keep_input_shape() {
        for arch in [Architecture::Compact(CompactConfig::default()), tiny_unet()] {
            let net = NetDenoiser::new(arch, &mut Rng::new(1)).unwrap();
            let x = Tensor::full([2, 3, 8, 8], 0.3);
            let y = net.predict(&x, &[5, 700]).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.all_finite());
        }
    }

    #[test]
    fn compact_config_is_limited_to_five_convolutions() {
        let arch = Architecture::Compact(CompactConfig {
            dilations: vec![1, 2, 4, 2],
            ..Default::default()
        });
        assert!(NetDenoiser::new(arch, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn unet_rejects_indivisible_sides() {
        let net = NetDenoiser::new(tiny_unet(), &mut Rng::new(1)).unwrap();
        assert!(net.predict(&Tensor::zeros([1, 3, 7, 8]), &[1]).is_err());
    }

    #[test]
    fn unet_default_builds() {
        let net = NetDenoiser::new(Architecture::Unet(UNetConfig::default()), &mut Rng::new(2)).unwrap();
        assert!(net.params().num_scalars() > 1_000_000);
    }

    #[test]
    fn timestep_embedding_is_sin_then_cos() {
        let e = timestep_embedding(&[0, 3], 4);
        assert_eq!(&e.item(0)[..], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.item(1)[0] - 3f32.sin()).abs() < 1e-6);
        assert!((e.item(1)[1] - (3.0f64 * 0.01).sin() as f32).abs() < 1e-6);
    }
}
