//! Score aggregation, mask thresholding and the two-pass detection pipeline.

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::mdps::{mdps_sample_many, ObservationModel, SamplerConfig};
use crate::perception::{difference_maps, DifferenceConfig, FeatureBackbone};
use crate::{Error, ImageTensor, MaskImage, NoiseSchedule, Result, Rng, ScoreMap};

/// Element-wise mean of equally shaped maps.
pub fn average_score_map(maps: &[ScoreMap]) -> Result<ScoreMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average an empty list of score maps".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut sum = vec![0f64; h * w];
    for m in maps {
        if m.height() != h || m.width() != w {
            return Err(Error::Shape(format!(
                "score maps differ: {h}x{w} vs {}x{}",
                m.height(),
                m.width()
            )));
        }
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            *s += v as f64;
        }
    }
    let n = maps.len() as f64;
    ScoreMap::new(h, w, sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Mean of the `s` largest entries (all entries when `s` exceeds the count).
pub fn image_score(map: &ScoreMap, s: usize) -> f64 {
    let mut idx: Vec<usize> = (0..map.len()).collect();
    let data = map.data();
    idx.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
    let k = s.clamp(1, map.len());
    idx[..k].iter().map(|&i| data[i] as f64).sum::<f64>() / k as f64
}

/// `S = 500` at 224x224 and above, one percent of the pixels otherwise.
pub fn default_top_s(pixels: usize) -> usize {
    if pixels >= 224 * 224 {
        500
    } else {
        ((0.01 * pixels as f64).round() as usize).max(1)
    }
}

/// Marks pixels strictly above `min + lambda (max - min)`.
pub fn generate_mask(map: &ScoreMap, lambda: f64) -> Result<MaskImage> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let (lo, hi) = (map.min() as f64, map.max() as f64);
    let threshold = lo + lambda * (hi - lo);
    Ok(MaskImage::from_fn(map.height(), map.width(), |y, x| {
        map.get(y, x) as f64 > threshold
    }))
}

/// Draws reconstructions of `y` that keep pixels with `mask = 0`.
pub trait PosteriorSampler: Send + Sync {
    fn sample(&self, y: &ImageTensor, mask: &MaskImage, rng: &Rng) -> Result<Vec<ImageTensor>>;
}

/// The masked diffusion posterior sampler.
pub struct MdpsSampler<'a> {
    pub model: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub config: SamplerConfig,
}

impl PosteriorSampler for MdpsSampler<'_> {
    fn sample(&self, y: &ImageTensor, mask: &MaskImage, rng: &Rng) -> Result<Vec<ImageTensor>> {
        let obs = ObservationModel::new(y, mask.clone())?;
        mdps_sample_many(&obs, self.model, self.schedule, &self.config, rng)
    }
}

/// Returns `samples` copies of the input: a perfect reconstruction.
#[derive(Debug, Clone, Copy)]
pub struct IdentitySampler {
    pub samples: usize,
}

impl PosteriorSampler for IdentitySampler {
    fn sample(&self, y: &ImageTensor, _mask: &MaskImage, _rng: &Rng) -> Result<Vec<ImageTensor>> {
        Ok(vec![y.to_model_space(); self.samples.max(1)])
    }
}

/// How the final sampling mask is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Pass 1 with a full mask, pass 2 with the thresholded mask.
    #[default]
    TwoPass,
    /// A single pass with every pixel masked.
    FullMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub lambda: f64,
    /// Top-S for the image score; derived from the resolution when absent.
    pub top_s: Option<usize>,
    pub mask_mode: MaskMode,
    /// Keep the individual difference maps in the result.
    pub keep_sample_maps: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            top_s: None,
            mask_mode: MaskMode::TwoPass,
            keep_sample_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    /// Averaged difference map of the final pass.
    pub score_map: ScoreMap,
    pub image_score: f64,
    /// The mask used by the final pass.
    pub mask: MaskImage,
    pub top_s: usize,
    pub sample_maps: Option<Vec<ScoreMap>>,
    /// Final-pass reconstructions in model space.
    pub reconstructions: Vec<ImageTensor>,
}

fn run_pass(
    pass: usize,
    y: &ImageTensor,
    mask: &MaskImage,
    sampler: &dyn PosteriorSampler,
    backbone: &dyn FeatureBackbone,
    diff: &DifferenceConfig,
    rng: &Rng,
) -> Result<(Vec<ImageTensor>, Vec<ScoreMap>, ScoreMap)> {
    let wrap = |e: Error| Error::Pass {
        pass,
        source: Box::new(e),
    };
    let samples = sampler.sample(y, mask, &rng.split(pass as u64)).map_err(wrap)?;
    let maps = difference_maps(&samples, y, backbone, diff).map_err(wrap)?;
    let mean = average_score_map(&maps).map_err(wrap)?;
    Ok((samples, maps, mean))
}

/// Scores one image. Pass `p` draws from `rng.split(p)`.
pub fn detect(
    y: &ImageTensor,
    sampler: &dyn PosteriorSampler,
    backbone: &dyn FeatureBackbone,
    diff: &DifferenceConfig,
    cfg: &DetectConfig,
    rng: &Rng,
) -> Result<AnomalyResult> {
    diff.validate()?;
    let full = MaskImage::ones(y.height(), y.width());
    let mask = match cfg.mask_mode {
        MaskMode::FullMask => full,
        MaskMode::TwoPass => {
            let (_, _, first) = run_pass(1, y, &full, sampler, backbone, diff, rng)?;
            generate_mask(&first, cfg.lambda)?
        }
    };
    let pass = match cfg.mask_mode {
        MaskMode::FullMask => 1,
        MaskMode::TwoPass => 2,
    };
    let (reconstructions, maps, score_map) = run_pass(pass, y, &mask, sampler, backbone, diff, rng)?;
    let top_s = cfg.top_s.unwrap_or_else(|| default_top_s(score_map.len()));
    if top_s == 0 {
        return Err(Error::InvalidArgument("top_s must be at least 1".into()));
    }
    Ok(AnomalyResult {
        image_score: image_score(&score_map, top_s),
        score_map,
        mask,
        top_s,
        sample_maps: cfg.keep_sample_maps.then_some(maps),
        reconstructions,
    })
}
