use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mvprior::data::{
    inject_noise, load_checkpoint, load_dataset, load_predictions, save_checkpoint, save_dataset, save_predictions,
    synth_generate, Checkpoint, MultiViewDataset, NoiseSpec, Predictions, SynthConfig,
};
use mvprior::diffengine::{init_checkpoint, reconstruct_all, train_from, EpochRecord, TrainingLog};
use mvprior::metrics::{mean_diameter, MetricReport};
use mvprior::triangulation::{triangulate_dataset, RobustConfig};
use mvprior::{DictionaryStack, Error, Shape3D};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{Cli, RunConfig, SweepConfig, RUN_CONFIG_FILE};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const HOLDOUT_DIR: &str = "holdout";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const COMPARE_TABLE_FILE: &str = "compare.txt";
pub const COMPARE_JSONL_FILE: &str = "compare.jsonl";

/// Relative PCK threshold used when none is configured.
pub const DEFAULT_PCK_FRACTION: f64 = 0.1;

/// Dispatches a parsed command line and returns the text to print.
pub fn run(cli: &Cli) -> CliResult<String> {
    let (name, args) = cli.command.parts();
    let config = RunConfig::resolve(name, args)?;
    match name {
        "synth" => cmd_synth(&config),
        "train" => cmd_train(&config),
        "reconstruct" => cmd_reconstruct(&config),
        "triangulate" => cmd_triangulate(&config),
        "compare" => cmd_compare(&config),
        "eval" => cmd_eval(&config),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn require_path<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    match path {
        None => Err(CliError::Usage(format!("{flag} is required"))),
        Some(p) if !p.exists() => Err(CliError::Usage(format!("{flag} {} does not exist", p.display()))),
        Some(p) => Ok(p),
    }
}

fn load_input(config: &RunConfig) -> CliResult<MultiViewDataset> {
    let ds = load_dataset(require_path(&config.dataset, "--dataset")?)?;
    Ok(match &config.views {
        Some(v) => ds.select_views(v)?,
        None => ds,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn pck_threshold(config: &RunConfig, gt: &[Shape3D]) -> f64 {
    config
        .pck_threshold
        .unwrap_or_else(|| DEFAULT_PCK_FRACTION * mean_diameter(gt))
}

/// Metrics over the finite points of each prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub report: MetricReport,
    /// Non-finite prediction rows excluded before alignment.
    pub dropped_points: usize,
    /// Instances left with fewer than three finite points.
    pub dropped_instances: Vec<usize>,
}

fn finite_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows()).filter(|&i| m.row(i).iter().all(|v| v.is_finite())).collect()
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Per-instance PA-MPJPE and PCK; rows that failed to reconstruct are dropped
/// from both prediction and ground truth.
pub fn evaluate(preds: &[Shape3D], gts: &[Shape3D], threshold: f64) -> CliResult<Evaluation> {
    if preds.len() != gts.len() {
        return Err(Error::Shape {
            context: "evaluate",
            expected: gts.len().to_string(),
            got: preds.len().to_string(),
        }
        .into());
    }
    let mut kept_p = Vec::with_capacity(preds.len());
    let mut kept_g = Vec::with_capacity(preds.len());
    let mut dropped_points = 0;
    let mut dropped_instances = Vec::new();
    for (n, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.is_finite() {
            kept_p.push(p.clone());
            kept_g.push(g.clone());
            continue;
        }
        let rows = finite_rows(p.matrix());
        dropped_points += p.num_points() - rows.len();
        if rows.len() < 3 {
            dropped_instances.push(n);
            continue;
        }
        kept_p.push(Shape3D::new(select_rows(p.matrix(), &rows))?);
        kept_g.push(Shape3D::new(select_rows(g.matrix(), &rows))?);
    }
    Ok(Evaluation {
        report: MetricReport::compute(&kept_p, &kept_g, threshold)?,
        dropped_points,
        dropped_instances,
    })
}

pub fn cmd_synth(config: &RunConfig) -> CliResult<String> {
    let n = config.synth.num_instances;
    let clean = synth_generate(&SynthConfig {
        num_instances: n + config.holdout,
        ..config.synth.clone()
    })?;
    let noisy = inject_noise(&clean, &config.noise)?;
    let (train, holdout) = noisy.split_at(n)?;
    config.record()?;
    save_dataset(&config.out, &train)?;
    if config.holdout > 0 {
        save_dataset(config.out.join(HOLDOUT_DIR), &holdout)?;
    }
    let s = &config.noise;
    Ok(format!(
        "wrote {}: N = {} (+{} held out), K = {}, P = {}, noise ext {} int {} kp {} (seed {})\n",
        config.out.display(),
        train.len(),
        holdout.len(),
        train.num_views(),
        train.num_points(),
        s.sigma_extrinsics,
        s.sigma_intrinsics,
        s.sigma_keypoints,
        s.seed
    ))
}

fn append_record(path: &Path, record: &EpochRecord) -> mvprior::Result<()> {
    let line = serde_json::to_string(record).expect("record serializes") + "\n";
    OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn previous_log(path: &Path, epochs: usize) -> CliResult<String> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().take(epochs).map(|l| format!("{l}\n")).collect())
}

pub fn cmd_train(config: &RunConfig) -> CliResult<String> {
    let ds = load_input(config)?;
    let ckpt_dir = config.out.join(CHECKPOINT_DIR);
    let log_path = config.out.join(TRAIN_LOG_FILE);
    let mut resolved = config.clone();
    resolved.widths = Some(config.train.widths.clone());

    let (start, kept_log) = if config.resume {
        let prev = RunConfig::from_file(&config.out.join(RUN_CONFIG_FILE))?;
        if prev.seed != config.seed || prev.train.widths != config.train.widths {
            return Err(Error::ConfigMismatch(format!(
                "resume with seed {} and widths {:?}, previous run used seed {} and widths {:?}",
                config.seed, config.train.widths, prev.seed, prev.train.widths
            ))
            .into());
        }
        let from = config.checkpoint.clone().unwrap_or_else(|| ckpt_dir.clone());
        let ckpt = load_checkpoint(&from)?;
        let kept = if log_path.exists() { previous_log(&log_path, ckpt.epoch)? } else { String::new() };
        (ckpt, kept)
    } else {
        (init_checkpoint(ds.num_points(), &config.train, config.seed)?, String::new())
    };
    start.theta.ensure_architecture(ds.num_points(), &config.train.widths)?;

    resolved.record()?;
    save_checkpoint(&ckpt_dir, &start)?;
    fs::write(&log_path, kept_log).map_err(|e| CliError::io(&log_path, e))?;

    let mut on_epoch = |ckpt: &Checkpoint, record: &EpochRecord| -> mvprior::Result<()> {
        save_checkpoint(&ckpt_dir, ckpt)?;
        append_record(&log_path, record)
    };
    // On divergence the checkpoint directory still holds the last finished epoch.
    let (last, log) = train_from(&ds, &config.train, config.seed, start, &mut on_epoch)?;
    Ok(train_summary(&ckpt_dir, last.epoch, &log))
}

fn train_summary(ckpt_dir: &Path, epoch: usize, log: &TrainingLog) -> String {
    let mut s = format!("checkpoint {} at epoch {epoch}\n", ckpt_dir.display());
    if let Some(r) = log.records.last() {
        let _ = write!(s, "final loss {:.6}", r.loss.total);
        if let Some(e) = r.pa_mpjpe {
            let _ = write!(s, ", PA-MPJPE {e:.6}");
        }
        s.push('\n');
    }
    s
}

fn load_theta(config: &RunConfig, num_points: usize) -> CliResult<DictionaryStack> {
    let ckpt = load_checkpoint(require_path(&config.checkpoint, "--checkpoint")?)?;
    let widths = config.widths.clone().unwrap_or_else(|| ckpt.theta.widths());
    ckpt.theta.ensure_architecture(num_points, &widths)?;
    Ok(ckpt.theta)
}

fn report_metrics(config: &RunConfig, preds: &[Shape3D], ds: &MultiViewDataset, out: &mut String) -> CliResult<()> {
    if let Some(gt) = ds.gt_shapes() {
        let eval = evaluate(preds, gt, pck_threshold(config, gt))?;
        write_json(&config.out.join(METRICS_FILE), &eval)?;
        out.push_str(&eval.report.summary());
        if eval.dropped_points > 0 {
            let _ = writeln!(out, "dropped {} missing points", eval.dropped_points);
        }
    }
    Ok(())
}

pub fn cmd_reconstruct(config: &RunConfig) -> CliResult<String> {
    let ds = load_input(config)?;
    let theta = load_theta(config, ds.num_points())?;
    let recs = reconstruct_all(ds.keypoints(), &theta)?;
    let preds = Predictions::from_reconstructions(&recs);
    let mut resolved = config.clone();
    resolved.widths = Some(theta.widths());
    resolved.record()?;
    let dir = config.out.join(PREDICTIONS_DIR);
    save_predictions(&dir, &preds)?;
    let mut out = format!("wrote {} ({} instances, K = {})\n", dir.display(), preds.len(), ds.num_views());
    report_metrics(config, &preds.shapes, &ds, &mut out)?;
    Ok(out)
}

fn triangulate_shapes(ds: &MultiViewDataset, robust: &RobustConfig) -> CliResult<Vec<Shape3D>> {
    let tri = triangulate_dataset(ds.keypoints(), ds.require_cameras()?, robust)?;
    Ok(tri.into_iter().map(|t| t.shape).collect())
}

pub fn cmd_triangulate(config: &RunConfig) -> CliResult<String> {
    let ds = load_input(config)?;
    let shapes = triangulate_shapes(&ds, &config.robust)?;
    let n = shapes.len();
    let preds = Predictions {
        shapes,
        rotations: vec![Vec::new(); n],
        scales: vec![Vec::new(); n],
        translations: vec![Vec::new(); n],
    };
    config.record()?;
    let dir = config.out.join(PREDICTIONS_DIR);
    save_predictions(&dir, &preds)?;
    let missing: usize = preds
        .shapes
        .iter()
        .map(|s| s.num_points() - finite_rows(s.matrix()).len())
        .sum();
    let mut out = format!("wrote {} ({n} instances, {missing} missing points)\n", dir.display());
    report_metrics(config, &preds.shapes, &ds, &mut out)?;
    Ok(out)
}

/// One noise setting of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareColumn {
    /// `clean`, `ext`, `int` or `kp`.
    pub channel: String,
    pub sigma: f64,
    pub trng: f64,
    pub prior: f64,
    pub trng_missing_points: usize,
}

impl CompareColumn {
    pub fn label(&self) -> String {
        if self.channel == "clean" {
            "clean".into()
        } else {
            format!("{} {}", self.channel, self.sigma)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub columns: Vec<CompareColumn>,
}

impl CompareTable {
    /// Two rows, TRNG and prior, one column per noise setting.
    pub fn render(&self) -> String {
        let mut s = format!("{:<8}", "PA-MPJPE");
        for c in &self.columns {
            let _ = write!(s, " {:>12}", c.label());
        }
        s.push('\n');
        for (name, pick) in [("TRNG", 0), ("prior", 1)] {
            let _ = write!(s, "{name:<8}");
            for c in &self.columns {
                let v = if pick == 0 { c.trng } else { c.prior };
                let _ = write!(s, " {v:>12.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.columns
            .iter()
            .map(|c| serde_json::to_string(c).expect("column serializes") + "\n")
            .collect()
    }

    pub fn column(&self, channel: &str, sigma: f64) -> Option<&CompareColumn> {
        self.columns.iter().find(|c| c.channel == channel && c.sigma == sigma)
    }
}

/// Triangulation and the prior on the same perturbed copies of `clean`.
pub fn compare_table(
    clean: &MultiViewDataset,
    theta: &DictionaryStack,
    sweep: &SweepConfig,
    noise_seed: u64,
    robust: &RobustConfig,
    pck_threshold: f64,
) -> CliResult<CompareTable> {
    let gt = clean.require_gt()?;
    let mut settings = vec![("clean", 0.0, NoiseSpec::default())];
    for &s in &sweep.extrinsics {
        settings.push(("ext", s, NoiseSpec { sigma_extrinsics: s, ..NoiseSpec::default() }));
    }
    for &s in &sweep.intrinsics {
        settings.push(("int", s, NoiseSpec { sigma_intrinsics: s, ..NoiseSpec::default() }));
    }
    for &s in &sweep.keypoints {
        settings.push(("kp", s, NoiseSpec { sigma_keypoints: s, ..NoiseSpec::default() }));
    }
    let mut columns = Vec::with_capacity(settings.len());
    for (channel, sigma, spec) in settings {
        let noisy = inject_noise(clean, &NoiseSpec { seed: noise_seed, ..spec })?;
        let tri = triangulate_shapes(&noisy, robust)?;
        let trng = evaluate(&tri, gt, pck_threshold)?;
        let recs = reconstruct_all(noisy.keypoints(), theta)?;
        let shapes: Vec<Shape3D> = recs.into_iter().map(|r| r.shape).collect();
        let prior = evaluate(&shapes, gt, pck_threshold)?;
        columns.push(CompareColumn {
            channel: channel.into(),
            sigma,
            trng: trng.report.pa_mpjpe,
            prior: prior.report.pa_mpjpe,
            trng_missing_points: trng.dropped_points,
        });
    }
    Ok(CompareTable { columns })
}

pub fn cmd_compare(config: &RunConfig) -> CliResult<String> {
    let ds = load_input(config)?;
    let theta = load_theta(config, ds.num_points())?;
    let thr = pck_threshold(config, ds.require_gt()?);
    let table = compare_table(&ds, &theta, &config.sweep, config.noise.seed, &config.robust, thr)?;
    let mut resolved = config.clone();
    resolved.widths = Some(theta.widths());
    resolved.record()?;
    let text = table.render();
    let txt = config.out.join(COMPARE_TABLE_FILE);
    fs::write(&txt, &text).map_err(|e| CliError::io(&txt, e))?;
    let jsonl = config.out.join(COMPARE_JSONL_FILE);
    fs::write(&jsonl, table.to_jsonl()).map_err(|e| CliError::io(&jsonl, e))?;
    Ok(text)
}

pub fn cmd_eval(config: &RunConfig) -> CliResult<String> {
    let ds = load_input(config)?;
    let preds = load_predictions(require_path(&config.predictions, "--predictions")?)?;
    let gt = ds.require_gt()?;
    let eval = evaluate(&preds.shapes, gt, pck_threshold(config, gt))?;
    config.record()?;
    write_json(&config.out.join(METRICS_FILE), &eval)?;
    let mut out = eval.report.summary();
    if eval.dropped_points > 0 {
        let _ = writeln!(out, "dropped {} missing points", eval.dropped_points);
    }
    Ok(out)
}
