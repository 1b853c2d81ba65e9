//! The command implementations behind the `mdps` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use mdps_core::data::{generate_synthetic, load_dataset, write_mvtec_layout, LabeledSample, Split};
use mdps_core::diffusion::{load_checkpoint, save_checkpoint, train, Checkpoint, NetDenoiser};
use mdps_core::eval::{
    detect_all, evaluate_items, run_ablation, with_average_rows, write_details_json,
    write_metrics_csv, AblationContext, EvalItem, MetricsRecord, PixelAurocMode, RecordDetail, TimedResult,
};
use mdps_core::mdps::{mdps_sample_many_traced, ObservationModel, SamplerConfig, StepTrace};
use mdps_core::oracle::{oracle_check, OracleReport};
use mdps_core::perception::{fetch_pretrained, FeatureBackbone};
use mdps_core::scoring::{detect, MdpsSampler, PosteriorSampler};
use mdps_core::{Error, ImageTensor, MaskImage, NoiseSchedule, Rng};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::export::{file_stem, heatmap_png, mask_png, read_score_maps, write_score_maps, StoredItem};
use crate::run::{Manifest, RunDir, CONFIG};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOSS_HISTORY: &str = "loss_history.csv";
pub const SCORES: &str = "scores.jsonl";
pub const SCORE_MAPS: &str = "score_maps.safetensors";
pub const TIMINGS: &str = "timings.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TRACE: &str = "trace.jsonl";

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub offline: bool,
    pub output: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.offline |= self.offline;
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        cfg
    }
}

/// Progress lines on stderr unless `quiet`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Reporter {
    pub quiet: bool,
}

impl Reporter {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Writes the synthetic benchmark when one is configured and the category is absent.
pub fn prepare_data(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let Some(spec) = &cfg.data.synthetic else {
        return Ok(None);
    };
    let dir = cfg.data.root.join(&cfg.data.category);
    if dir.exists() {
        return Ok(None);
    }
    let bench = generate_synthetic(spec)?;
    Ok(Some(write_mvtec_layout(&bench, &cfg.data.root, &cfg.data.category)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthOutcome {
    pub command: &'static str,
    pub dataset: PathBuf,
    pub created: bool,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutcome> {
    if cfg.data.synthetic.is_none() {
        return Err(CliError::Config {
            path: PathBuf::from(CONFIG),
            message: "no [data.synthetic] section to generate from".into(),
        });
    }
    let created = prepare_data(cfg)?;
    Ok(SynthOutcome {
        command: "synth",
        dataset: cfg.data.root.join(&cfg.data.category),
        created: created.is_some(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub command: &'static str,
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}

pub fn cmd_train(cfg: &RunConfig, report: Reporter) -> Result<TrainOutcome> {
    prepare_data(cfg)?;
    let samples = load_dataset(&cfg.dataset(Split::Train))?;
    let images: Vec<ImageTensor> = samples.into_iter().map(|s| s.image).collect();
    let schedule = cfg.noise_schedule()?;
    let master = Rng::new(cfg.seed);
    let mut model = NetDenoiser::new(cfg.model.clone(), &mut master.split(0))?;
    let run = RunDir::create(&cfg.output_dir, "train")?;
    run.write_config(cfg)?;
    report.say(format!(
        "training on {} images of `{}` for {} epochs",
        images.len(),
        cfg.data.category,
        cfg.train.epochs
    ));
    let started = Instant::now();
    let mut on_epoch = |e: usize, loss: f64| {
        if e % 10 == 9 || e + 1 == cfg.train.epochs {
            report.say(format!("epoch {:>5}  loss {loss:.5}  {:.0}s", e + 1, started.elapsed().as_secs_f64()));
        }
    };
    let history = match train(&mut model, &images, &cfg.train, &schedule, &mut master.split(1), &mut on_epoch) {
        Ok(h) => h,
        Err(Error::Divergence { step, history }) => {
            run.write(LOSS_HISTORY, loss_csv(&history))?;
            return Err(Error::Divergence { step, history }.into());
        }
        Err(e) => return Err(e.into()),
    };
    run.write(LOSS_HISTORY, loss_csv(&history))?;
    let checkpoint = run.join(CHECKPOINT_FILE);
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            model,
            schedule: cfg.schedule,
            train_config: cfg.train.clone(),
            category: cfg.data.category.clone(),
        },
    )?;
    let mut manifest = Manifest::new("train", cfg).with_checkpoint(&checkpoint)?;
    manifest.extra.insert("train_images".into(), images.len().into());
    manifest.extra.insert("wall_time_s".into(), started.elapsed().as_secs_f64().into());
    run.write_manifest(&manifest)?;
    Ok(TrainOutcome {
        command: "train",
        run_dir: run.path().to_path_buf(),
        checkpoint,
        epochs: history.len(),
        final_loss: history.last().copied(),
    })
}

/// Loads a checkpoint and checks it against the configuration.
///
/// With `force` a mismatch is reported but tolerated; the checkpoint's own
/// schedule is used in that case.
pub fn load_checked_checkpoint(path: &Path, cfg: &RunConfig, force: bool, report: Reporter) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let mut problems = Vec::new();
    if ckpt.category != cfg.data.category {
        problems.push(format!(
            "checkpoint was trained on category `{}` but the config selects `{}`",
            ckpt.category, cfg.data.category
        ));
    }
    if ckpt.schedule != cfg.schedule {
        problems.push(format!(
            "checkpoint schedule {:?} differs from the configured {:?}",
            ckpt.schedule, cfg.schedule
        ));
    }
    if ckpt.model.architecture() != &cfg.model {
        problems.push("checkpoint architecture differs from the configured model".to_string());
    }
    if problems.is_empty() {
        return Ok(ckpt);
    }
    let msg = problems.join("; ");
    if force {
        report.say(format!("warning: {msg} (continuing because of --force)"));
        Ok(ckpt)
    } else {
        Err(CliError::Mismatch(format!("{msg}; pass --force to use it anyway")))
    }
}

fn load_backbone(cfg: &RunConfig) -> Result<Box<dyn FeatureBackbone>> {
    Ok(fetch_pretrained(&cfg.backbone, &cfg.cache_dir(), cfg.offline)?)
}

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub anomalous: bool,
    pub image_score: f64,
    pub lambda: f64,
    #[serde(rename = "S")]
    pub top_s: usize,
    #[serde(rename = "N_s")]
    pub n_s: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectOutcome {
    pub command: &'static str,
    pub run_dir: PathBuf,
    pub images: usize,
    pub metrics: Option<MetricsRecord>,
}

/// Records the step diagnostics of every sampling call.
struct TracingSampler<'a> {
    inner: MdpsSampler<'a>,
    traces: Mutex<Vec<Vec<StepTrace>>>,
}

impl PosteriorSampler for TracingSampler<'_> {
    fn sample(&self, y: &ImageTensor, mask: &MaskImage, rng: &Rng) -> mdps_core::Result<Vec<ImageTensor>> {
        let obs = ObservationModel::new(y, mask.clone())?;
        let mut trace = Vec::new();
        let out = mdps_sample_many_traced(
            &obs,
            self.inner.model,
            self.inner.schedule,
            &self.inner.config,
            rng,
            &mut trace,
        )?;
        self.traces.lock().expect("trace lock").push(trace);
        Ok(out)
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    image_id: &'a str,
    pass: usize,
    step: usize,
    t: usize,
    s: usize,
    guidance_grad_norm: &'a [f64],
    x0_hat_mean: Vec<f64>,
}

fn mean(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len().max(1) as f64
}

/// Sequential detection that also writes `trace.jsonl`; results match [`detect_all`].
fn detect_traced(
    run: &RunDir,
    test: &[LabeledSample],
    sampler: MdpsSampler<'_>,
    backbone: &dyn FeatureBackbone,
    cfg: &RunConfig,
) -> Result<Vec<TimedResult>> {
    let tracer = TracingSampler {
        inner: sampler,
        traces: Mutex::new(Vec::new()),
    };
    let master = Rng::new(cfg.seed);
    let mut lines = String::new();
    let mut out = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        let start = Instant::now();
        let result = detect(&s.image, &tracer, backbone, &cfg.difference, &cfg.detect, &master.split(i as u64))?;
        out.push(TimedResult {
            result,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        let passes = std::mem::take(&mut *tracer.traces.lock().expect("trace lock"));
        for (p, trace) in passes.iter().enumerate() {
            for st in trace {
                let line = TraceLine {
                    image_id: &s.image_id,
                    pass: p + 1,
                    step: st.step,
                    t: st.t,
                    s: st.s,
                    guidance_grad_norm: &st.guidance_grad_norm,
                    x0_hat_mean: st.x0_hat.iter().map(|x| mean(x.data())).collect(),
                };
                lines.push_str(&serde_json::to_string(&line)?);
                lines.push('\n');
            }
        }
    }
    run.write(TRACE, lines)?;
    Ok(out)
}

fn metrics_record(cfg: &RunConfig, sampler: &SamplerConfig, variant: &str, items: &[EvalItem], wall: f64) -> Result<Option<MetricsRecord>> {
    let has_both = items.iter().any(|i| i.anomalous) && items.iter().any(|i| !i.anomalous);
    if !has_both {
        return Ok(None);
    }
    let m = evaluate_items(items, PixelAurocMode::Exact)?;
    Ok(Some(MetricsRecord {
        category: cfg.data.category.clone(),
        variant: variant.to_string(),
        image_auroc: m.image.auroc,
        pixel_auroc: m.pixel.auroc,
        n_s: sampler.samples,
        rho: sampler.rho,
        lambda: cfg.detect.lambda,
        t: sampler.noise_level,
        n: sampler.steps,
        seed: cfg.seed,
        wall_time_s: wall,
    }))
}

pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path, force: bool, trace: bool, report: Reporter) -> Result<DetectOutcome> {
    let ckpt = load_checked_checkpoint(checkpoint, cfg, force, report)?;
    let schedule = NoiseSchedule::linear(ckpt.schedule.t_max, ckpt.schedule.beta_start, ckpt.schedule.beta_end)?;
    cfg.sampler.validate(&schedule)?;
    prepare_data(cfg)?;
    let test = load_dataset(&cfg.dataset(Split::Test))?;
    let backbone = load_backbone(cfg)?;
    let run = RunDir::create(&cfg.output_dir, "detect")?;
    run.write_config(cfg)?;
    report.say(format!(
        "scoring {} test images of `{}` with N_s={} rho={} T={} N={}",
        test.len(),
        cfg.data.category,
        cfg.sampler.samples,
        cfg.sampler.rho,
        cfg.sampler.noise_level,
        cfg.sampler.steps
    ));
    let sampler = MdpsSampler {
        model: &ckpt.model,
        schedule: &schedule,
        config: cfg.sampler.clone(),
    };
    let started = Instant::now();
    let timed = if trace {
        detect_traced(&run, &test, sampler, backbone.as_ref(), cfg)?
    } else {
        detect_all(&test, &sampler, backbone.as_ref(), &cfg.difference, &cfg.detect, cfg.seed)?
    };
    report.say(format!("detection finished in {:.1}s", started.elapsed().as_secs_f64()));

    let scale = timed.iter().map(|t| t.result.score_map.max()).fold(0f32, f32::max);
    let mut scores = String::new();
    let mut timings = csv::Writer::from_writer(Vec::new());
    timings.write_record(["image_id", "wall_time_s"])?;
    let mut stored = Vec::with_capacity(test.len());
    for (s, t) in test.iter().zip(&timed) {
        let r = &t.result;
        let rec = ScoreRecord {
            image_id: s.image_id.clone(),
            anomalous: s.is_anomalous(),
            image_score: r.image_score,
            lambda: cfg.detect.lambda,
            top_s: r.top_s,
            n_s: cfg.sampler.samples,
            t: cfg.sampler.noise_level,
            n: cfg.sampler.steps,
            rho: cfg.sampler.rho,
            seed: cfg.seed,
        };
        scores.push_str(&serde_json::to_string(&rec)?);
        scores.push('\n');
        timings.write_record([s.image_id.clone(), t.wall_time_s.to_string()])?;
        let stem = file_stem(&s.image_id);
        run.write(&format!("heatmaps/{stem}.png"), heatmap_png(&r.score_map, scale)?)?;
        run.write(&format!("masks/{stem}.png"), mask_png(&r.mask)?)?;
        stored.push(StoredItem {
            image_id: s.image_id.clone(),
            item: EvalItem {
                score_map: r.score_map.clone(),
                image_score: r.image_score,
                gt: s.pixel_labels(),
                anomalous: s.is_anomalous(),
            },
        });
    }
    run.write(SCORES, scores)?;
    let timings = timings.into_inner().map_err(|e| CliError::artifact(run.join(TIMINGS), e))?;
    run.write(TIMINGS, timings)?;
    write_score_maps(&run.join(SCORE_MAPS), &stored)?;

    let mean_wall = timed.iter().map(|t| t.wall_time_s).sum::<f64>() / timed.len().max(1) as f64;
    let items: Vec<EvalItem> = stored.into_iter().map(|s| s.item).collect();
    let metrics = metrics_record(cfg, &cfg.sampler, "mdps", &items, mean_wall)?;
    if let Some(m) = &metrics {
        write_metrics_csv(&run.join(METRICS_CSV), std::slice::from_ref(m))?;
        run.write_json(METRICS_JSON, m)?;
        report.say(format!("image AUROC {:.4}  pixel AUROC {:.4}", m.image_auroc, m.pixel_auroc));
    }
    let mut manifest = Manifest::new("detect", cfg).with_checkpoint(checkpoint)?;
    manifest.extra.insert("heatmap_scale".into(), (scale as f64).into());
    manifest.extra.insert("images".into(), test.len().into());
    manifest.extra.insert("forced".into(), force.into());
    run.write_manifest(&manifest)?;
    Ok(DetectOutcome {
        command: "detect",
        run_dir: run.path().to_path_buf(),
        images: test.len(),
        metrics,
    })
}

/// Detection run directories at or below `root`, sorted by path.
pub fn find_detect_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(CliError::Results(format!("{} is not a directory", root.display())));
    }
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(SCORE_MAPS).is_file() {
            found.push(dir);
            continue;
        }
        for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn mean_wall_time(path: &Path) -> Result<f64> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut values = Vec::new();
    for row in reader.records() {
        let row = row?;
        let v: f64 = row
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::artifact(path, "malformed timing row"))?;
        values.push(v);
    }
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateOutcome {
    pub command: &'static str,
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

/// Recomputes metrics from stored score maps; the table gains an average row
/// when several categories are present.
pub fn evaluate_results(results: &Path) -> Result<Vec<MetricsRecord>> {
    let runs = find_detect_runs(results)?;
    if runs.is_empty() {
        return Err(CliError::Results(format!(
            "no detection results under {}",
            results.display()
        )));
    }
    let mut records = Vec::new();
    for dir in &runs {
        let cfg = RunConfig::load(&dir.join(CONFIG))?;
        let stored = read_score_maps(&dir.join(SCORE_MAPS))?;
        let items: Vec<EvalItem> = stored.into_iter().map(|s| s.item).collect();
        let wall = mean_wall_time(&dir.join(TIMINGS))?;
        let rec = metrics_record(&cfg, &cfg.sampler, "mdps", &items, wall)?.ok_or_else(|| {
            CliError::Results(format!("{} needs both normal and anomalous images", dir.display()))
        })?;
        records.push(rec);
    }
    Ok(with_average_rows(&records))
}

pub fn cmd_evaluate(results: &Path, output: Option<&Path>, report: Reporter) -> Result<EvaluateOutcome> {
    let records = evaluate_results(results)?;
    let run = RunDir::create(output.unwrap_or(results), "evaluate")?;
    write_metrics_csv(&run.join(METRICS_CSV), &records)?;
    run.write_json(METRICS_JSON, &records)?;
    for r in &records {
        report.say(format!(
            "{:<16} {:<8} image {:.4}  pixel {:.4}",
            r.category, r.variant, r.image_auroc, r.pixel_auroc
        ));
    }
    Ok(EvaluateOutcome {
        command: "evaluate",
        run_dir: run.path().to_path_buf(),
        records,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateOutcome {
    pub command: &'static str,
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, force: bool, report: Reporter) -> Result<AblateOutcome> {
    let ckpt = load_checked_checkpoint(checkpoint, cfg, force, report)?;
    let schedule = NoiseSchedule::linear(ckpt.schedule.t_max, ckpt.schedule.beta_start, ckpt.schedule.beta_end)?;
    cfg.sampler.validate(&schedule)?;
    prepare_data(cfg)?;
    let test = load_dataset(&cfg.dataset(Split::Test))?;
    let backbone = load_backbone(cfg)?;
    let run = RunDir::create(&cfg.output_dir, "ablate")?;
    run.write_config(cfg)?;
    let ctx = AblationContext {
        category: &cfg.data.category,
        model: &ckpt.model,
        schedule: &schedule,
        backbone: backbone.as_ref(),
        test_set: &test,
        seed: cfg.seed,
    };
    let mut write_err = None;
    let mut on_point = |d: &RecordDetail| {
        report.say(format!(
            "{:<24} image {:.4}  pixel {:.4}",
            d.record.variant, d.record.image_auroc, d.record.pixel_auroc
        ));
        let name = format!("points/{}/record.json", file_stem(&d.record.variant));
        if let Err(e) = run.write_json(&name, d) {
            write_err.get_or_insert(e);
        }
    };
    let details = run_ablation(&cfg.ablation, &ctx, &cfg.sampler, &cfg.detect, &cfg.difference, &mut on_point)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let records: Vec<MetricsRecord> = details.iter().map(|d| d.record.clone()).collect();
    write_metrics_csv(&run.join(ABLATION_CSV), &records)?;
    write_details_json(&run.join(ABLATION_JSON), &details)?;
    let mut manifest = Manifest::new("ablate", cfg).with_checkpoint(checkpoint)?;
    manifest.extra.insert("points".into(), details.len().into());
    run.write_manifest(&manifest)?;
    Ok(AblateOutcome {
        command: "ablate",
        run_dir: run.path().to_path_buf(),
        records,
    })
}

/// Per-ρ aggregate of the oracle reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub rho: f64,
    pub mean_of_means: f64,
    pub median_distance_to_y: f64,
    pub max_prior_z: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub command: String,
    pub run_dir: PathBuf,
    pub summary: Vec<OracleSummary>,
    /// Median distance to `y` never increases along the configured ρ list.
    pub distance_non_increasing: bool,
    pub reports: Vec<OracleReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn cmd_oracle_check(cfg: &RunConfig, report: Reporter) -> Result<OracleOutcome> {
    let schedule = cfg.noise_schedule()?;
    let setup = cfg.oracle.setup();
    if cfg.oracle.n_seeds == 0 || cfg.oracle.rho.is_empty() {
        return Err(Error::InvalidArgument("oracle needs at least one seed and one rho".into()).into());
    }
    let run = RunDir::create(&cfg.output_dir, "oracle-check")?;
    run.write_config(cfg)?;
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for &rho in &cfg.oracle.rho {
        let sampler = cfg.oracle.sampler(rho);
        let batch = (0..cfg.oracle.n_seeds)
            .map(|k| oracle_check(&setup, &sampler, &schedule, cfg.seed + k))
            .collect::<mdps_core::Result<Vec<_>>>()?;
        let s = OracleSummary {
            rho,
            mean_of_means: batch.iter().map(|r| r.empirical_mean).sum::<f64>() / batch.len() as f64,
            median_distance_to_y: median(batch.iter().map(|r| r.distance_to_y).collect()),
            max_prior_z: batch
                .iter()
                .map(|r| r.distance_to_prior_mean / r.prior_standard_error)
                .fold(0.0, f64::max),
        };
        report.say(format!(
            "rho {:<6} mean {:.4}  median |mean - y| {:.4}",
            s.rho, s.mean_of_means, s.median_distance_to_y
        ));
        summary.push(s);
        reports.extend(batch);
    }
    let distance_non_increasing = summary
        .windows(2)
        .all(|w| w[1].median_distance_to_y <= w[0].median_distance_to_y);
    let outcome = OracleOutcome {
        command: "oracle-check".into(),
        run_dir: run.path().to_path_buf(),
        summary,
        distance_non_increasing,
        reports,
    };
    run.write_json("oracle.json", &outcome)?;
    run.write_manifest(&Manifest::new("oracle-check", cfg))?;
    Ok(outcome)
}
