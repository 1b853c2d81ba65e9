//! AUROC metrics, run evaluation and the ablation runner.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::diffusion::Denoiser;
use crate::mdps::SamplerConfig;
use crate::perception::{DifferenceConfig, FeatureBackbone, MetricMode};
use crate::scoring::{detect, AnomalyResult, DetectConfig, MaskMode, MdpsSampler, PosteriorSampler};
use crate::{Error, MaskImage, NoiseSchedule, Result, Rng, ScoreMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `(fpr, tpr)` points from the strictest threshold down, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<(f64, f64)>>,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Rank-based AUROC; tied positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral so ties stay exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        // Ranks i+1..=j+1 share the average rank (i + j + 2) / 2.
        twice_rank_sum += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(RocResult {
        auroc: twice_u as f64 / (2 * np * n_neg as u128) as f64,
        n_pos,
        n_neg,
        curve: None,
    })
}

/// AUROC from a 1024-bin histogram of the scores; equal-bin pairs count one half.
pub fn auroc_bucketed(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    const BINS: usize = 1024;
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / BINS as f64;
    let mut pos = [0u64; BINS];
    let mut neg = [0u64; BINS];
    for (&s, &l) in scores.iter().zip(labels) {
        let bin = if width > 0.0 {
            (((s - lo) / width) as usize).min(BINS - 1)
        } else {
            0
        };
        if l {
            pos[bin] += 1;
        } else {
            neg[bin] += 1;
        }
    }
    let (mut twice_pairs, mut neg_below) = (0u128, 0u128);
    for b in 0..BINS {
        twice_pairs += pos[b] as u128 * (2 * neg_below + neg[b] as u128);
        neg_below += neg[b] as u128;
    }
    Ok(RocResult {
        auroc: twice_pairs as f64 / (2 * n_pos as u128 * n_neg as u128) as f64,
        n_pos,
        n_neg,
        curve: None,
    })
}

/// ROC points over all distinct thresholds, strictest first.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        if k + 1 == order.len() || scores[order[k + 1]] != scores[i] {
            points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelAurocMode {
    #[default]
    Exact,
    Bucketed,
}

/// One scored test image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub score_map: ScoreMap,
    pub image_score: f64,
    pub gt: MaskImage,
    pub anomalous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub image: RocResult,
    pub pixel: RocResult,
}

/// Image-AUROC over image scores and Pixel-AUROC over all pixels pooled.
pub fn evaluate_items(items: &[EvalItem], mode: PixelAurocMode) -> Result<RunMetrics> {
    for item in items {
        if item.gt.height() != item.score_map.height() || item.gt.width() != item.score_map.width() {
            return Err(Error::Shape(format!(
                "score map {}x{} vs ground truth {}x{}",
                item.score_map.height(),
                item.score_map.width(),
                item.gt.height(),
                item.gt.width()
            )));
        }
    }
    let scores: Vec<f64> = items.iter().map(|i| i.image_score).collect();
    let labels: Vec<bool> = items.iter().map(|i| i.anomalous).collect();
    let image = auroc(&scores, &labels)?;
    let pixel_scores: Vec<f64> = items
        .iter()
        .flat_map(|i| i.score_map.data().iter().map(|&v| v as f64))
        .collect();
    let pixel_labels: Vec<bool> = items
        .iter()
        .flat_map(|i| i.gt.data().iter().map(|&v| v == 1))
        .collect();
    let pixel = match mode {
        PixelAurocMode::Exact => auroc(&pixel_scores, &pixel_labels)?,
        PixelAurocMode::Bucketed => auroc_bucketed(&pixel_scores, &pixel_labels)?,
    };
    Ok(RunMetrics { image, pixel })
}

/// Pairs detection results with their samples and evaluates them.
pub fn evaluate_run(results: &[AnomalyResult], samples: &[LabeledSample]) -> Result<RunMetrics> {
    if results.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} results for {} samples",
            results.len(),
            samples.len()
        )));
    }
    let items = results
        .iter()
        .zip(samples)
        .map(|(r, s)| {
            if s.is_anomalous() && s.gt_mask.is_none() {
                return Err(Error::Dataset(format!("{} has no ground-truth mask", s.image_id)));
            }
            Ok(EvalItem {
                score_map: r.score_map.clone(),
                image_score: r.image_score,
                gt: s.pixel_labels(),
                anomalous: s.is_anomalous(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_items(&items, PixelAurocMode::Exact)
}

/// Detection result of one test image plus its wall time.
#[derive(Debug, Clone)]
pub struct TimedResult {
    pub result: AnomalyResult,
    pub wall_time_s: f64,
}

/// Runs [`detect`] on every sample; image `i` draws from `Rng::new(seed).split(i)`.
pub fn detect_all(
    samples: &[LabeledSample],
    sampler: &dyn PosteriorSampler,
    backbone: &dyn FeatureBackbone,
    diff: &DifferenceConfig,
    cfg: &DetectConfig,
    seed: u64,
) -> Result<Vec<TimedResult>> {
    let master = Rng::new(seed);
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let start = Instant::now();
            let result = detect(&s.image, sampler, backbone, diff, cfg, &master.split(i as u64))?;
            Ok(TimedResult {
                result,
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub category: String,
    pub variant: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    #[serde(rename = "N_s")]
    pub n_s: usize,
    pub rho: f64,
    pub lambda: f64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// A record with the full configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDetail {
    pub record: MetricsRecord,
    pub sampler: SamplerConfig,
    pub detect: DetectConfig,
    pub difference: DifferenceConfig,
}

/// Appends an average row over categories for every variant.
pub fn with_average_rows(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    let mut out = records.to_vec();
    let mut variants: Vec<&str> = records.iter().map(|r| r.variant.as_str()).collect();
    variants.sort_unstable();
    variants.dedup();
    for v in variants {
        let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.variant == v).collect();
        if rows.len() < 2 {
            continue;
        }
        let n = rows.len() as f64;
        out.push(MetricsRecord {
            category: "average".into(),
            image_auroc: rows.iter().map(|r| r.image_auroc).sum::<f64>() / n,
            pixel_auroc: rows.iter().map(|r| r.pixel_auroc).sum::<f64>() / n,
            wall_time_s: rows.iter().map(|r| r.wall_time_s).sum::<f64>() / n,
            ..rows[0].clone()
        });
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_details_json(path: &Path, details: &[RecordDetail]) -> Result<()> {
    let text = serde_json::to_string_pretty(details)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    VanillaDdim,
    NoMask,
    NoPosterior,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::VanillaDdim => "vanilla_ddim",
            Variant::NoMask => "no_mask",
            Variant::NoPosterior => "no_posterior",
        }
    }

    /// Sampler and detection settings of this variant derived from the full method.
    pub fn apply(self, sampler: &SamplerConfig, detect: &DetectConfig) -> (SamplerConfig, DetectConfig) {
        let (mut s, mut d) = (sampler.clone(), detect.clone());
        match self {
            Variant::Full => {}
            Variant::VanillaDdim => {
                s.rho = 0.0;
                d.mask_mode = MaskMode::FullMask;
            }
            Variant::NoMask => d.mask_mode = MaskMode::FullMask,
            Variant::NoPosterior => s.rho = 0.0,
        }
        (s, d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub rho: Vec<f64>,
    pub samples: Vec<usize>,
    pub lambda: Vec<f64>,
    pub metric_modes: Vec<MetricMode>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Full, Variant::VanillaDdim, Variant::NoMask, Variant::NoPosterior],
            rho: Vec::new(),
            samples: Vec::new(),
            lambda: Vec::new(),
            metric_modes: Vec::new(),
        }
    }
}

/// A single point of an ablation plan.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    /// Row label, e.g. `full`, `rho=10`, `metric=pixel_only`.
    pub name: String,
    pub sampler: SamplerConfig,
    pub detect: DetectConfig,
    pub difference: DifferenceConfig,
}

impl AblationPlan {
    /// Expands the plan; `full` is always the first point.
    pub fn points(&self, sampler: &SamplerConfig, detect: &DetectConfig, diff: &DifferenceConfig) -> Vec<AblationPoint> {
        let point = |name: String, (s, d): (SamplerConfig, DetectConfig), diff: DifferenceConfig| AblationPoint {
            name,
            sampler: s,
            detect: d,
            difference: diff,
        };
        let base = (sampler.clone(), detect.clone());
        let mut out = vec![point("full".into(), base.clone(), diff.clone())];
        for v in self.variants.iter().filter(|&&v| v != Variant::Full) {
            out.push(point(v.name().into(), v.apply(sampler, detect), diff.clone()));
        }
        for &rho in &self.rho {
            let s = SamplerConfig { rho, ..sampler.clone() };
            out.push(point(format!("rho={rho}"), (s, detect.clone()), diff.clone()));
        }
        for &n in &self.samples {
            let s = SamplerConfig { samples: n, ..sampler.clone() };
            out.push(point(format!("n_s={n}"), (s, detect.clone()), diff.clone()));
        }
        for &lambda in &self.lambda {
            let d = DetectConfig { lambda, ..detect.clone() };
            out.push(point(format!("lambda={lambda}"), (sampler.clone(), d), diff.clone()));
        }
        for &mode in &self.metric_modes {
            let name = serde_json::to_value(mode)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let dc = DifferenceConfig { mode, ..diff.clone() };
            out.push(point(format!("metric={name}"), base.clone(), dc));
        }
        out
    }
}

/// What the ablation runner evaluates against.
pub struct AblationContext<'a> {
    pub category: &'a str,
    pub model: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub backbone: &'a dyn FeatureBackbone,
    pub test_set: &'a [LabeledSample],
    pub seed: u64,
}

/// Evaluates every point of `plan`. Points with identical settings are run once.
pub fn run_ablation(
    plan: &AblationPlan,
    ctx: &AblationContext<'_>,
    sampler: &SamplerConfig,
    detect_cfg: &DetectConfig,
    diff: &DifferenceConfig,
    on_point: &mut dyn FnMut(&RecordDetail),
) -> Result<Vec<RecordDetail>> {
    let mut done: Vec<RecordDetail> = Vec::new();
    for p in plan.points(sampler, detect_cfg, diff) {
        let reuse = done
            .iter()
            .find(|d| d.sampler == p.sampler && d.detect == p.detect && d.difference == p.difference)
            .map(|d| d.record.clone());
        let record = match reuse {
            Some(r) => MetricsRecord {
                variant: p.name.clone(),
                ..r
            },
            None => evaluate_point(&p, ctx)?,
        };
        let detail = RecordDetail {
            record,
            sampler: p.sampler,
            detect: p.detect,
            difference: p.difference,
        };
        on_point(&detail);
        done.push(detail);
    }
    Ok(done)
}

fn evaluate_point(p: &AblationPoint, ctx: &AblationContext<'_>) -> Result<MetricsRecord> {
    let sampler = MdpsSampler {
        model: ctx.model,
        schedule: ctx.schedule,
        config: p.sampler.clone(),
    };
    let start = Instant::now();
    let timed = detect_all(ctx.test_set, &sampler, ctx.backbone, &p.difference, &p.detect, ctx.seed)?;
    let elapsed = start.elapsed().as_secs_f64();
    let results: Vec<AnomalyResult> = timed.into_iter().map(|t| t.result).collect();
    let metrics = evaluate_run(&results, ctx.test_set)?;
    Ok(MetricsRecord {
        category: ctx.category.to_string(),
        variant: p.name.clone(),
        image_auroc: metrics.image.auroc,
        pixel_auroc: metrics.pixel.auroc,
        n_s: p.sampler.samples,
        rho: p.sampler.rho,
        lambda: p.detect.lambda,
        t: p.sampler.noise_level,
        n: p.sampler.steps,
        seed: ctx.seed,
        wall_time_s: elapsed / ctx.test_set.len().max(1) as f64,
    })
}
