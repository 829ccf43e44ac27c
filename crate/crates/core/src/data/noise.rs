use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MultiViewDataset;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, Keypoints2D};
use crate::triangulation::CalibratedCamera;

/// Perturbation levels of the three noise channels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Radians for the rotation angle, length units for the translation.
    pub sigma_extrinsics: f64,
    /// Relative std of focal length and principal point.
    pub sigma_intrinsics: f64,
    /// Pixels.
    pub sigma_keypoints: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma_extrinsics", self.sigma_extrinsics),
            ("sigma_intrinsics", self.sigma_intrinsics),
            ("sigma_keypoints", self.sigma_keypoints),
        ] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be a finite nonnegative number, got {s}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_extrinsics == 0.0 && self.sigma_intrinsics == 0.0 && self.sigma_keypoints == 0.0
    }
}

const MAX_FOCAL_RETRIES: usize = 100;

// Each channel draws from its own stream so that one channel's level never
// changes another channel's draws, and the same unit normals are reused
// across levels.
fn channel_rng(seed: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Applies the declared perturbations; ground truth is never touched.
pub fn inject_noise(dataset: &MultiViewDataset, spec: &NoiseSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut out = dataset.clone();
    if (spec.sigma_extrinsics > 0.0 || spec.sigma_intrinsics > 0.0) && out.cameras().is_none() {
        return Err(Error::InvalidInput("calibration noise requested on a dataset without cameras".into()));
    }

    if spec.sigma_extrinsics > 0.0 {
        let sigma = spec.sigma_extrinsics;
        let mut rng = channel_rng(spec.seed, 1);
        for cam in out.cameras_mut().expect("checked") {
            let axis = Vector3::from_fn(|_, _| normal(&mut rng));
            let angle = normal(&mut rng) * sigma;
            let dt = Vector3::from_fn(|_, _| normal(&mut rng)) * sigma;
            *cam = CalibratedCamera::new(cam.intrinsics, axis_angle(&axis, angle) * cam.rotation, cam.translation + dt)?;
        }
    }

    if spec.sigma_intrinsics > 0.0 {
        let sigma = spec.sigma_intrinsics;
        let mut rng = channel_rng(spec.seed, 2);
        for cam in out.cameras_mut().expect("checked") {
            let mut k = cam.intrinsics;
            let mut factor = 1.0 + sigma * normal(&mut rng);
            let mut retries = 0;
            while !(factor * k[(0, 0)] > 0.0 && factor * k[(1, 1)] > 0.0) {
                retries += 1;
                if retries > MAX_FOCAL_RETRIES {
                    return Err(Error::NumericalFailure {
                        term: "focal".into(),
                        value: factor * k[(0, 0)],
                    });
                }
                factor = 1.0 + sigma * normal(&mut rng);
            }
            k[(0, 0)] *= factor;
            k[(1, 1)] *= factor;
            k[(0, 1)] *= factor;
            k[(0, 2)] *= 1.0 + sigma * normal(&mut rng);
            k[(1, 2)] *= 1.0 + sigma * normal(&mut rng);
            *cam = CalibratedCamera::new(k, cam.rotation, cam.translation)?;
        }
    }

    if spec.sigma_keypoints > 0.0 {
        let sigma = spec.sigma_keypoints;
        let mut rng = channel_rng(spec.seed, 3);
        for views in out.keypoints_mut() {
            for w in views.iter_mut() {
                let (p, c) = w.shape();
                let noise = DMatrix::from_fn(p, c, |_, _| normal(&mut rng) * sigma);
                *w = Keypoints2D::new(w.matrix() + noise)?;
            }
        }
    }
    Ok(out)
}
