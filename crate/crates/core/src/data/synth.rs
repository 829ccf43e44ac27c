use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MultiViewDataset;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, Keypoints2D, Shape3D};
use crate::triangulation::CalibratedCamera;

/// Parameters of the synthetic deformable rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_points: usize,
    pub num_views: usize,
    pub num_instances: usize,
    pub basis_rank: usize,
    /// Standard deviation of the deformation coefficients, relative to the
    /// mean shape's norm.
    pub deform_scale: f64,
    pub seed: u64,
    /// Pixels.
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// Camera distance in units of the largest point radius.
    pub distance_factor: f64,
    pub min_separation_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_points: 20,
            num_views: 4,
            num_instances: 200,
            basis_rank: 5,
            deform_scale: 0.25,
            seed: 0,
            focal: 4000.0,
            principal_point: [512.0, 512.0],
            distance_factor: 20.0,
            min_separation_deg: 20.0,
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Rotation of a camera at `center` looking at the origin, rolled by `roll`.
fn look_at_origin(center: &Vector3<f64>, roll: f64) -> Matrix3<f64> {
    let z = -center.normalize();
    let helper = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let x0 = helper.cross(&z).normalize();
    let x = axis_angle(&z, roll) * x0;
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Draws a random low-rank deformable shape family observed by `K` pinhole
/// cameras and returns exact projections with ground truth and calibration.
pub fn synth_generate(config: &SynthConfig) -> Result<MultiViewDataset> {
    let p = config.num_points;
    if p < 2 {
        return Err(Error::InvalidInput("synthetic rig needs at least 2 points".into()));
    }
    if config.num_views == 0 {
        return Err(Error::InvalidInput("synthetic rig needs at least one view".into()));
    }
    if config.basis_rank > 3 * p {
        return Err(Error::InvalidInput(format!("basis_rank {} exceeds 3P = {}", config.basis_rank, 3 * p)));
    }
    if !(config.deform_scale >= 0.0) || !(config.focal > 0.0) || !(config.distance_factor > 1.0) {
        return Err(Error::InvalidInput("invalid synthetic rig parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut mean = randn(&mut rng, p, 3);
    center_columns(&mut mean);
    let mean_norm = mean.norm();
    let bases: Vec<DMatrix<f64>> = (0..config.basis_rank)
        .map(|_| {
            let mut b = randn(&mut rng, p, 3);
            center_columns(&mut b);
            let n = b.norm();
            b * (mean_norm / n)
        })
        .collect();

    let mut shapes = Vec::with_capacity(config.num_instances);
    for _ in 0..config.num_instances {
        let mut s = mean.clone();
        for b in &bases {
            let c: f64 = rng.sample::<f64, _>(StandardNormal) * config.deform_scale;
            s += b * c;
        }
        shapes.push(Shape3D::new(s)?);
    }

    let r_max = shapes
        .iter()
        .flat_map(|s| (0..p).map(move |i| s.row(i).norm()))
        .fold(mean_norm / (p as f64).sqrt(), f64::max);
    let distance = config.distance_factor * r_max;

    let min_cos = config.min_separation_deg.to_radians().cos();
    let mut dirs: Vec<Vector3<f64>> = Vec::with_capacity(config.num_views);
    let mut attempts = 0;
    while dirs.len() < config.num_views {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::InvalidInput(format!(
                "cannot place {} cameras {}° apart",
                config.num_views, config.min_separation_deg
            )));
        }
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() < 1e-9 {
            continue;
        }
        let u = v.normalize();
        if dirs.iter().all(|d| d.dot(&u) < min_cos) {
            dirs.push(u);
        }
    }
    let pp = Vector2::new(config.principal_point[0], config.principal_point[1]);
    let cameras = dirs
        .iter()
        .map(|u| {
            let center = u * distance;
            let roll = rng.random_range(0.0..std::f64::consts::TAU);
            let r = look_at_origin(&center, roll);
            CalibratedCamera::pinhole(config.focal, pp, r, -(r * center))
        })
        .collect::<Result<Vec<_>>>()?;

    let keypoints = shapes
        .iter()
        .map(|s| {
            cameras
                .iter()
                .map(|c| Keypoints2D::new(c.project_shape(s)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    MultiViewDataset::new(p, config.num_views, keypoints, Some(shapes), Some(cameras))
}
