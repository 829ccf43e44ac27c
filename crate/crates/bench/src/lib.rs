//! Fixtures shared by the benchmarks.

use mvprior::data::{synth_generate, MultiViewDataset, SynthConfig};
use mvprior::diffengine::{init_checkpoint, TrainConfig};
use mvprior::DictionaryStack;

/// A synthetic rig plus freshly initialized parameters.
pub fn fixture(num_points: usize, num_views: usize, num_instances: usize, widths: &[usize]) -> (MultiViewDataset, DictionaryStack) {
    let ds = synth_generate(&SynthConfig {
        num_points,
        num_views,
        num_instances,
        seed: 1,
        ..SynthConfig::default()
    })
    .expect("valid rig");
    let config = TrainConfig {
        widths: widths.to_vec(),
        ..TrainConfig::default()
    };
    let theta = init_checkpoint(num_points, &config, 1).expect("valid widths").theta;
    (ds, theta)
}
