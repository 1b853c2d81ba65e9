//! Pixel and perceptual difference between a reconstruction and its input.

mod cache;
mod resnet;
mod toy;

pub use cache::{default_cache_dir, fetch_pretrained, fetch_weights, sha256_file, BackboneKind, CACHE_ENV};
pub use resnet::{ResNetBackbone, ResNetSpec};
pub use toy::{IdentityBackbone, ToyBackbone};

use mdps_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, ImageTensor, Result, ScoreMap};

/// A multi-stage feature extractor with decreasing spatial resolution.
pub trait FeatureBackbone: Send + Sync {
    fn name(&self) -> String;

    fn num_stages(&self) -> usize;

    /// Stage outputs as `[1, C_i, H_i, W_i]` tensors. Accepts images in any
    /// range; model-space input is mapped to `[0, 1]` first.
    fn extract(&self, img: &ImageTensor) -> Result<Vec<Tensor>>;
}

/// Which terms of the difference metric are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    #[default]
    Combined,
    PixelOnly,
    PerceptualOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifferenceConfig {
    /// Weight of the pixel L1 term.
    pub eta: f64,
    /// One-based stage indices.
    pub stages: Vec<usize>,
    pub mode: MetricMode,
}

impl Default for DifferenceConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            stages: vec![1, 2, 3],
            mode: MetricMode::Combined,
        }
    }
}

impl DifferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::InvalidArgument(
                "stages must be a non-empty set of one-based indices".into(),
            ));
        }
        Ok(())
    }

    fn uses_pixels(&self) -> bool {
        self.mode != MetricMode::PerceptualOnly
    }

    fn uses_features(&self) -> bool {
        self.mode != MetricMode::PixelOnly
    }
}

/// Per-position `1 - cos` between two feature maps, clamped at zero; positions
/// where either vector is (near) zero contribute nothing.
pub fn cosine_distance_map(a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    a.check_same(b, "feature maps")?;
    let [_, c, h, w] = a.shape();
    let hw = h * w;
    let (a, b) = (a.item(0), b.item(0));
    let mut out = vec![0f32; hw];
    for (k, o) in out.iter_mut().enumerate() {
        let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
        for ch in 0..c {
            let (x, y) = (a[ch * hw + k] as f64, b[ch * hw + k] as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        if na < 1e-12 || nb < 1e-12 {
            continue;
        }
        *o = (1.0 - dot / (na * nb)).max(0.0) as f32;
    }
    Ok(out)
}

/// Bilinear resize of a single-channel map (half-pixel centres, edge clamp).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Features of `y` reused across several reconstructions.
pub struct Reference<'a> {
    y: ImageTensor,
    features: Vec<Tensor>,
    backbone: &'a dyn FeatureBackbone,
    cfg: DifferenceConfig,
}

impl<'a> Reference<'a> {
    pub fn new(y: &ImageTensor, backbone: &'a dyn FeatureBackbone, cfg: &DifferenceConfig) -> Result<Self> {
        cfg.validate()?;
        let max_stage = *cfg.stages.iter().max().expect("validated non-empty");
        if cfg.uses_features() && backbone.num_stages() < max_stage {
            return Err(Error::InvalidArgument(format!(
                "backbone `{}` has {} stages, stage {max_stage} requested",
                backbone.name(),
                backbone.num_stages()
            )));
        }
        let y = y.to_unit();
        let features = if cfg.uses_features() {
            backbone.extract(&y)?
        } else {
            Vec::new()
        };
        Ok(Self {
            y,
            features,
            backbone,
            cfg: cfg.clone(),
        })
    }

    /// Difference map between `x0` and the reference image.
    pub fn difference(&self, x0: &ImageTensor) -> Result<ScoreMap> {
        let x0 = x0.to_unit();
        x0.check_same_shape(&self.y, "reconstruction and image")?;
        let [c, h, w] = x0.shape();
        let hw = h * w;
        let mut map = vec![0f32; hw];
        if self.cfg.uses_pixels() {
            let eta = self.cfg.eta as f32;
            for ch in 0..c {
                let (a, b) = (&x0.data()[ch * hw..(ch + 1) * hw], &self.y.data()[ch * hw..(ch + 1) * hw]);
                for ((m, &p), &q) in map.iter_mut().zip(a).zip(b) {
                    *m += eta * (p - q).abs();
                }
            }
        }
        if self.cfg.uses_features() {
            let feats = self.backbone.extract(&x0)?;
            let mut stages = self.cfg.stages.clone();
            stages.sort_unstable();
            stages.dedup();
            for stage in stages {
                let (fa, fb) = (&feats[stage - 1], &self.features[stage - 1]);
                let d = cosine_distance_map(fa, fb)?;
                let up = resize_bilinear(&d, fa.height(), fa.width(), h, w);
                for (m, v) in map.iter_mut().zip(up) {
                    *m += v;
                }
            }
        }
        ScoreMap::new(h, w, map)
    }
}

/// `eta * |y - x0|_1 + sum_j (1 - cos(F_j(x0), F_j(y)))` at every position.
pub fn difference_map(
    x0: &ImageTensor,
    y: &ImageTensor,
    backbone: &dyn FeatureBackbone,
    cfg: &DifferenceConfig,
) -> Result<ScoreMap> {
    x0.check_same_shape(y, "reconstruction and image")?;
    Reference::new(y, backbone, cfg)?.difference(x0)
}

/// One difference map per reconstruction; features of `y` are computed once.
pub fn difference_maps(
    samples: &[ImageTensor],
    y: &ImageTensor,
    backbone: &dyn FeatureBackbone,
    cfg: &DifferenceConfig,
) -> Result<Vec<ScoreMap>> {
    let reference = Reference::new(y, backbone, cfg)?;
    samples.iter().map(|x| reference.difference(x)).collect()
}
