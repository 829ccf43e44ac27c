//! Calibrated multi-view triangulation with iterative outlier rejection.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{is_rotation, Shape3D};

/// Pinhole camera: `x ~ K (R X + t)`, world to camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedCamera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CalibratedCamera {
    pub fn new(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera with focal length `focal` and principal point `pp`.
    pub fn pinhole(focal: f64, pp: Vector2<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let k = Matrix3::new(focal, 0.0, pp.x, 0.0, focal, pp.y, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !k.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite camera".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidInput("intrinsics must be upper triangular with K[2][2] = 1".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !is_rotation(&self.rotation, 1e-9) {
            return Err(Error::InvalidInput("extrinsic rotation is not in SO(3)".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Point in camera coordinates.
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Pixel projection of a world point.
    pub fn project(&self, x: &Vector3<f64>) -> Vector2<f64> {
        let h = self.intrinsics * self.to_camera(x);
        Vector2::new(h.x / h.z, h.y / h.z)
    }

    /// Projects every point of a shape.
    pub fn project_shape(&self, s: &Shape3D) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(s.num_points(), 2);
        for i in 0..s.num_points() {
            let p = self.project(&s.row(i).transpose());
            out[(i, 0)] = p.x;
            out[(i, 1)] = p.y;
        }
        out
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, uv: &Vector2<f64>) -> Result<Vector2<f64>> {
        let k_inv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("singular intrinsics".into()))?;
        let r = k_inv * Vector3::new(uv.x, uv.y, 1.0);
        Ok(Vector2::new(r.x / r.z, r.y / r.z))
    }
}

/// Relative singular-value gap below which the DLT nullspace is ambiguous.
pub const DLT_GAP_TOL: f64 = 1e-10;

/// Homogeneous coordinate magnitude below which a point is at infinity.
pub const INFINITY_TOL: f64 = 1e-12;

/// Linear triangulation from `K >= 2` pixel observations.
pub fn triangulate_dlt(observations: &[Vector2<f64>], cameras: &[CalibratedCamera]) -> Result<Vector3<f64>> {
    if observations.len() != cameras.len() {
        return Err(Error::shape("triangulate_dlt", cameras.len(), observations.len()));
    }
    if cameras.len() < 2 {
        return Err(Error::InsufficientViews {
            needed: 2,
            have: cameras.len(),
        });
    }
    let mut a = DMatrix::zeros(2 * cameras.len(), 4);
    for (k, (uv, cam)) in observations.iter().zip(cameras).enumerate() {
        if !uv.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        let x = cam.normalize(uv)?;
        let mut p = DMatrix::zeros(3, 4);
        p.view_mut((0, 0), (3, 3)).copy_from(&cam.rotation);
        p.view_mut((0, 3), (3, 1)).copy_from(&cam.translation);
        for c in 0..4 {
            a[(2 * k, c)] = x.x * p[(2, c)] - p[(0, c)];
            a[(2 * k + 1, c)] = x.y * p[(2, c)] - p[(1, c)];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sigma = &svd.singular_values;
    let n = sigma.len();
    // nalgebra sorts singular values in decreasing order.
    let (s_last, s_prev) = (sigma[n - 1], sigma[n - 2]);
    if s_prev - s_last < DLT_GAP_TOL * sigma[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(format!(
            "ambiguous DLT nullspace (singular-value gap {:.3e})",
            s_prev - s_last
        )));
    }
    let h = v_t.row(n - 1);
    if h[3].abs() < INFINITY_TOL {
        return Err(Error::PointAtInfinity(h[3]));
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Pixel reprojection error of `x` in every view.
pub fn reprojection_errors(x: &Vector3<f64>, observations: &[Vector2<f64>], cameras: &[CalibratedCamera]) -> Vec<f64> {
    observations
        .iter()
        .zip(cameras)
        .map(|(uv, cam)| (cam.project(x) - uv).norm())
        .collect()
}

/// Triangulation settings of the robust baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub iters: usize,
    /// Pixels.
    pub reproj_threshold: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            iters: 3,
            reproj_threshold: 5.0,
        }
    }
}

/// Repeated DLT dropping the single worst view per iteration while its error
/// exceeds the threshold and at least two views remain.
pub fn robust_triangulate(
    observations: &[Vector2<f64>],
    cameras: &[CalibratedCamera],
    iters: usize,
    reproj_threshold: f64,
) -> Result<(Vector3<f64>, Vec<bool>)> {
    let mut mask = vec![true; cameras.len()];
    let subset = |mask: &[bool]| -> (Vec<Vector2<f64>>, Vec<CalibratedCamera>) {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (observations[i], cameras[i]))
            .unzip()
    };
    let (obs, cams) = subset(&mask);
    let mut x = triangulate_dlt(&obs, &cams)?;
    for _ in 0..iters {
        let active = mask.iter().filter(|&&m| m).count();
        if active <= 2 {
            break;
        }
        let errors = reprojection_errors(&x, observations, cameras);
        let worst = (0..cameras.len())
            .filter(|&i| mask[i])
            .max_by(|&a, &b| errors[a].total_cmp(&errors[b]))
            .expect("active views");
        if errors[worst] <= reproj_threshold {
            break;
        }
        mask[worst] = false;
        let (obs, cams) = subset(&mask);
        x = triangulate_dlt(&obs, &cams)?;
    }
    Ok((x, mask))
}

/// Triangulated shape of one instance; failed points are NaN rows listed in
/// `missing`.
#[derive(Debug, Clone)]
pub struct TriangulatedShape {
    pub shape: Shape3D,
    pub missing: Vec<usize>,
    /// Per point, which views survived rejection.
    pub inliers: Vec<Vec<bool>>,
}

impl TriangulatedShape {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Robust triangulation of every point of every instance. `keypoints[n][k]`
/// holds the pixel observations of instance `n` in view `k`.
pub fn triangulate_dataset(
    keypoints: &[Vec<crate::geometry::Keypoints2D>],
    cameras: &[CalibratedCamera],
    config: &RobustConfig,
) -> Result<Vec<TriangulatedShape>> {
    let mut out = Vec::with_capacity(keypoints.len());
    for views in keypoints {
        if views.len() != cameras.len() {
            return Err(Error::shape("triangulate_dataset", cameras.len(), views.len()));
        }
        let p = views.first().map_or(0, |w| w.num_points());
        let mut shape = DMatrix::from_element(p, 3, f64::NAN);
        let mut missing = Vec::new();
        let mut inliers = Vec::with_capacity(p);
        for i in 0..p {
            let obs: Vec<Vector2<f64>> = views.iter().map(|w| Vector2::new(w[(i, 0)], w[(i, 1)])).collect();
            match robust_triangulate(&obs, cameras, config.iters, config.reproj_threshold) {
                Ok((x, mask)) => {
                    shape.row_mut(i).copy_from(&x.transpose());
                    inliers.push(mask);
                }
                Err(_) => {
                    missing.push(i);
                    inliers.push(vec![false; cameras.len()]);
                }
            }
        }
        out.push(TriangulatedShape {
            shape: Shape3D::new(shape)?,
            missing,
            inliers,
        });
    }
    Ok(out)
}
