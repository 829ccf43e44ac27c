//! Reverse-mode differentiation, loss assembly and training.

mod adam;
mod model;
mod params;
mod train;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model::{
    batch_loss, grad, identity_rf_bias, instance_terms, loss_and_grad, loss_total, InstanceTerms, LossTerms, LossWeights,
    OnpMode, ParamVars,
};
pub use params::{ParamLayout, ParamVector};
pub use tape::{Tape, Var};
pub use train::{
    dataset_pa_mpjpe, epoch_order, init_checkpoint, reconstruct_all, train, train_from, EpochRecord, TrainConfig, TrainingLog,
};
