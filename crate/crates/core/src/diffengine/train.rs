use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{loss_and_grad, LossTerms, LossWeights, OnpMode};
use crate::data::{Checkpoint, MultiViewDataset};
use crate::error::{Error, Result};
use crate::geometry::Keypoints2D;
use crate::metrics;
use crate::neural_prior::{forward, DictionaryStack, Reconstruction};

/// Architecture and optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub widths: Vec<usize>,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Instances per step; all views of an instance share a batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub onp_mode: OnpMode,
    /// Evaluate PA-MPJPE every this many epochs (0: final epoch only).
    /// Needs ground truth; skipped otherwise.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![128, 64, 32, 16, 8],
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 200,
            onp_mode: OnpMode::default(),
            eval_every: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Pair-weighted mean of the per-step losses.
    pub loss: LossTerms,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pa_mpjpe: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Line-delimited JSON records.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss.total).collect()
    }
}

/// Freshly initialized parameters and optimizer state.
pub fn init_checkpoint(num_points: usize, config: &TrainConfig, seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = DictionaryStack::init(num_points, &config.widths, &mut rng)?;
    let adam = AdamState::new(config.adam, theta.num_parameters());
    Ok(Checkpoint {
        theta,
        adam: Some(adam),
        epoch: 0,
    })
}

/// Instance order of a given epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs the prior on every instance.
pub fn reconstruct_all(instances: &[Vec<Keypoints2D>], theta: &DictionaryStack) -> Result<Vec<Reconstruction>> {
    instances.iter().map(|views| forward(views, theta)).collect()
}

/// Mean per-instance PA-MPJPE of the prior against the dataset ground truth.
pub fn dataset_pa_mpjpe(dataset: &MultiViewDataset, theta: &DictionaryStack) -> Result<f64> {
    let gt = dataset.require_gt()?;
    let recs = reconstruct_all(dataset.keypoints(), theta)?;
    let shapes: Vec<_> = recs.into_iter().map(|r| r.shape).collect();
    Ok(metrics::MetricReport::compute(&shapes, gt, 1.0)?.pa_mpjpe)
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NumericalFailure { .. } | Error::Degenerate(_) | Error::ReflectionAmbiguity(_))
}

/// Fits a stack from scratch. Deterministic given `(dataset, config, seed)`
/// apart from wall times.
pub fn train(dataset: &MultiViewDataset, config: &TrainConfig, seed: u64) -> Result<(DictionaryStack, TrainingLog)> {
    let start = init_checkpoint(dataset.num_points(), config, seed)?;
    let (ckpt, log) = train_from(dataset, config, seed, start, &mut |_, _| Ok(()))?;
    Ok((ckpt.theta, log))
}

/// Continues training from `start` up to `config.epochs`, calling `on_epoch`
/// after every completed epoch. A run resumed from any of those checkpoints
/// reproduces the uninterrupted run exactly.
pub fn train_from(
    dataset: &MultiViewDataset,
    config: &TrainConfig,
    seed: u64,
    start: Checkpoint,
    on_epoch: &mut dyn FnMut(&Checkpoint, &EpochRecord) -> Result<()>,
) -> Result<(Checkpoint, TrainingLog)> {
    if config.batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be positive".into()));
    }
    start.theta.ensure_architecture(dataset.num_points(), &config.widths)?;
    if start.epoch > config.epochs {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint is at epoch {} but the run stops at {}",
            start.epoch, config.epochs
        )));
    }
    if dataset.is_empty() && start.epoch < config.epochs {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    let mut theta = start.theta;
    let mut adam = start
        .adam
        .unwrap_or_else(|| AdamState::new(config.adam, theta.num_parameters()));
    if adam.m.len() != theta.num_parameters() {
        return Err(Error::ConfigMismatch("optimizer state does not match parameters".into()));
    }
    adam.config = config.adam;
    let mut log = TrainingLog::default();
    let total_pairs = (dataset.len() * dataset.num_views()) as f64;

    for epoch in start.epoch..config.epochs {
        let clock = Instant::now();
        let last_good = theta.clone();
        let diverged = |source: Error| Error::Diverged {
            epoch: epoch + 1,
            source: Box::new(source),
            last_good: Box::new(last_good.clone()),
        };
        let order = epoch_order(dataset.len(), seed, epoch);
        let mut acc = LossTerms::default();
        for batch in order.chunks(config.batch_size) {
            let views: Vec<&[Keypoints2D]> = batch.iter().map(|&n| dataset.instance(n)).collect();
            let (terms, grad) = match loss_and_grad(&views, &theta, &config.weights, config.onp_mode) {
                Ok(v) => v,
                Err(e) if is_numerical(&e) => return Err(diverged(e)),
                Err(e) => return Err(e),
            };
            let (next, state) = adam_step(&theta, &grad, &adam).map_err(diverged)?;
            theta = next;
            adam = state;
            let w = (batch.len() * dataset.num_views()) as f64 / total_pairs;
            acc.reprojection += w * terms.reprojection;
            acc.sparsity += w * terms.sparsity;
            acc.dictionary += w * terms.dictionary;
            acc.rotation += w * terms.rotation;
            acc.total += w * terms.total;
        }
        let done = epoch + 1;
        let evaluate = dataset.gt_shapes().is_some()
            && (done == config.epochs || (config.eval_every > 0 && done % config.eval_every == 0));
        let pa_mpjpe = if evaluate {
            Some(dataset_pa_mpjpe(dataset, &theta).map_err(|e| if is_numerical(&e) { diverged(e) } else { e })?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: done,
            loss: acc,
            wall_time_s: clock.elapsed().as_secs_f64(),
            pa_mpjpe,
        };
        log.records.push(record);
        let ckpt = Checkpoint {
            theta: theta.clone(),
            adam: Some(adam.clone()),
            epoch: done,
        };
        on_epoch(&ckpt, &record)?;
    }
    Ok((
        Checkpoint {
            theta,
            adam: Some(adam),
            epoch: config.epochs.max(start.epoch),
        },
        log,
    ))
}
