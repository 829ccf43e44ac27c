use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvprior::data::{NoiseSpec, SynthConfig};
use mvprior::diffengine::{OnpMode, TrainConfig};
use mvprior::triangulation::RobustConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mvprior", version, about = "Multi-view non-rigid reconstruction with a learned sparse shape prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-camera dataset.
    Synth(RunArgs),
    /// Fit a dictionary stack to a dataset.
    Train(RunArgs),
    /// Apply a checkpoint to a dataset.
    Reconstruct(RunArgs),
    /// Robust DLT triangulation baseline.
    Triangulate(RunArgs),
    /// Baseline vs prior across noise settings.
    Compare(RunArgs),
    /// Score saved predictions against ground truth.
    Eval(RunArgs),
}

impl Command {
    pub fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Synth(a) => ("synth", a),
            Command::Train(a) => ("train", a),
            Command::Reconstruct(a) => ("reconstruct", a),
            Command::Triangulate(a) => ("triangulate", a),
            Command::Compare(a) => ("compare", a),
            Command::Eval(a) => ("eval", a),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnpArg {
    Differentiate,
    Frozen,
}

/// Flags shared by every subcommand; unset flags fall back to `--config`,
/// then to defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated view indices to keep.
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    /// Comma-separated dictionary widths; the depth is their count.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,

    #[arg(long)]
    pub num_points: Option<usize>,
    #[arg(long)]
    pub num_views: Option<usize>,
    #[arg(long)]
    pub num_instances: Option<usize>,
    #[arg(long)]
    pub basis_rank: Option<usize>,
    #[arg(long)]
    pub deform_scale: Option<f64>,
    /// Extra held-out instances written to `<out>/holdout`.
    #[arg(long)]
    pub holdout: Option<usize>,

    #[arg(long)]
    pub sigma_ext: Option<f64>,
    #[arg(long)]
    pub sigma_int: Option<f64>,
    #[arg(long)]
    pub sigma_kp: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,

    #[arg(long)]
    pub w_sparse: Option<f64>,
    #[arg(long)]
    pub w_dict: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub onp_mode: Option<OnpArg>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,

    #[arg(long)]
    pub pck_threshold: Option<f64>,
    #[arg(long)]
    pub robust_iters: Option<usize>,
    #[arg(long)]
    pub reproj_threshold: Option<f64>,

    #[arg(long, value_delimiter = ',')]
    pub sweep_ext: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_int: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_kp: Option<Vec<f64>>,
}

/// Noise levels swept by `compare`, one column each after the clean one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub extrinsics: Vec<f64>,
    pub intrinsics: Vec<f64>,
    pub keypoints: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            extrinsics: vec![0.1, 0.5, 0.9],
            intrinsics: vec![0.1, 0.5, 0.9],
            keypoints: vec![15.0, 25.0, 35.0],
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub views: Option<Vec<usize>>,
    /// `None` means the training default or, for inference, the checkpoint's.
    pub widths: Option<Vec<usize>>,
    pub synth: SynthConfig,
    pub holdout: usize,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub resume: bool,
    pub pck_threshold: Option<f64>,
    pub robust: RobustConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            dataset: None,
            checkpoint: None,
            predictions: None,
            out: PathBuf::from("out"),
            seed: 0,
            views: None,
            widths: None,
            synth: SynthConfig::default(),
            holdout: 0,
            noise: NoiseSpec::default(),
            train: TrainConfig::default(),
            resume: false,
            pck_threshold: None,
            robust: RobustConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Flags over `--config` over defaults.
    pub fn resolve(command: &str, args: &RunArgs) -> CliResult<Self> {
        let mut c = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        c.command = command.to_string();
        if args.dataset.is_some() {
            c.dataset = args.dataset.clone();
        }
        if args.checkpoint.is_some() {
            c.checkpoint = args.checkpoint.clone();
        }
        if args.predictions.is_some() {
            c.predictions = args.predictions.clone();
        }
        set(&mut c.out, args.out.clone());
        set(&mut c.seed, args.seed);
        if args.views.is_some() {
            c.views = args.views.clone();
        }
        if args.widths.is_some() {
            c.widths = args.widths.clone();
        }

        set(&mut c.synth.num_points, args.num_points);
        set(&mut c.synth.num_views, args.num_views);
        set(&mut c.synth.num_instances, args.num_instances);
        set(&mut c.synth.basis_rank, args.basis_rank);
        set(&mut c.synth.deform_scale, args.deform_scale);
        set(&mut c.holdout, args.holdout);
        c.synth.seed = c.seed;

        set(&mut c.noise.sigma_extrinsics, args.sigma_ext);
        set(&mut c.noise.sigma_intrinsics, args.sigma_int);
        set(&mut c.noise.sigma_keypoints, args.sigma_kp);
        set(&mut c.noise.seed, args.noise_seed);

        let t = &mut c.train;
        set(&mut t.weights.w_sparse, args.w_sparse);
        set(&mut t.weights.w_dict, args.w_dict);
        set(&mut t.weights.beta, args.beta);
        set(&mut t.adam.lr, args.lr);
        set(&mut t.adam.beta1, args.adam_beta1);
        set(&mut t.adam.beta2, args.adam_beta2);
        set(&mut t.adam.eps, args.adam_eps);
        set(&mut t.batch_size, args.batch_size);
        set(&mut t.epochs, args.epochs);
        set(&mut t.eval_every, args.eval_every);
        if let Some(m) = args.onp_mode {
            t.onp_mode = match m {
                OnpArg::Differentiate => OnpMode::Differentiate,
                OnpArg::Frozen => OnpMode::Frozen,
            };
        }
        if let Some(w) = &c.widths {
            t.widths = w.clone();
        }
        c.resume |= args.resume;

        if args.pck_threshold.is_some() {
            c.pck_threshold = args.pck_threshold;
        }
        set(&mut c.robust.iters, args.robust_iters);
        set(&mut c.robust.reproj_threshold, args.reproj_threshold);
        set(&mut c.sweep.extrinsics, args.sweep_ext.clone());
        set(&mut c.sweep.intrinsics, args.sweep_int.clone());
        set(&mut c.sweep.keypoints, args.sweep_kp.clone());
        Ok(c)
    }

    /// Writes the resolved configuration into the output directory.
    pub fn record(&self) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

pub const RUN_CONFIG_FILE: &str = "run_config.json";
