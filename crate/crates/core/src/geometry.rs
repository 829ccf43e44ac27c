//! Weak-perspective camera model, SO(3) utilities, the closed-form
//! orthographic-n-point (OnP) solver and similarity Procrustes alignment.
//!
//! Shapes are stored as `P x 3` matrices (one row per keypoint) and 2D
//! observations as `P x 2` matrices, so a weak-perspective projection is the
//! row-vector product `s * S * R_xy + 1 * t^T` where `R_xy` holds the first two
//! columns of the rotation.

use std::ops::Deref;

use nalgebra::{DMatrix, Matrix3, Matrix3x2, RowVector2, RowVector3, UnitQuaternion, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

/// Canonical-frame 3D shape, `P x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D(DMatrix<f64>);

/// 2D keypoints of one view, `P x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D(DMatrix<f64>);

macro_rules! point_matrix {
    ($ty:ident, $cols:expr, $row:ty) => {
        impl $ty {
            pub fn new(points: DMatrix<f64>) -> Result<Self> {
                if points.ncols() != $cols {
                    return Err(Error::shape(
                        stringify!($ty),
                        format!("P x {}", $cols),
                        format!("{} x {}", points.nrows(), points.ncols()),
                    ));
                }
                Ok(Self(points))
            }

            pub fn zeros(num_points: usize) -> Self {
                Self(DMatrix::zeros(num_points, $cols))
            }

            pub fn from_rows(rows: &[[f64; $cols]]) -> Self {
                Self(DMatrix::from_fn(rows.len(), $cols, |i, j| rows[i][j]))
            }

            pub fn num_points(&self) -> usize {
                self.0.nrows()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn matrix(&self) -> &DMatrix<f64> {
                &self.0
            }

            pub fn into_inner(self) -> DMatrix<f64> {
                self.0
            }

            pub fn row(&self, i: usize) -> $row {
                <$row>::from_fn(|_, j| self.0[(i, j)])
            }

            /// Column means.
            pub fn centroid(&self) -> $row {
                let n = self.0.nrows().max(1) as f64;
                <$row>::from_fn(|_, j| self.0.column(j).sum() / n)
            }

            /// Copy with the centroid removed, plus the centroid.
            pub fn centered(&self) -> (Self, $row) {
                let mean = self.centroid();
                let mut out = self.0.clone();
                for mut row in out.row_iter_mut() {
                    row -= &mean;
                }
                (Self(out), mean)
            }
        }

        impl Deref for $ty {
            type Target = DMatrix<f64>;

            fn deref(&self) -> &DMatrix<f64> {
                &self.0
            }
        }
    };
}

point_matrix!(Shape3D, 3, RowVector3<f64>);
point_matrix!(Keypoints2D, 2, RowVector2<f64>);

/// Weak-perspective camera: rotation, positive scale and image translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector2<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, scale: f64, translation: Vector2<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            scale,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "camera scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite camera translation".into()));
        }
        if !is_rotation(&self.rotation, ROTATION_TOL) {
            return Err(Error::InvalidInput(
                "camera rotation is not in SO(3)".into(),
            ));
        }
        Ok(())
    }

    /// First two columns of the rotation.
    pub fn r_xy(&self) -> Matrix3x2<f64> {
        self.rotation.fixed_columns::<2>(0).into_owned()
    }
}

/// `R^T R = I` and `det R = +1` within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite())
        && (r.transpose() * r - Matrix3::identity()).norm() <= tol
        && (r.determinant() - 1.0).abs() <= tol
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if q.norm() > 1e-6 {
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q));
            return q.to_rotation_matrix().into_inner();
        }
    }
}

/// Rotation by `angle` radians about `axis` (need not be unit length).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    nalgebra::Rotation3::from_scaled_axis(axis * (angle / n)).into_inner()
}

/// `W = s * S * R_xy + 1 * t^T`.
pub fn project_weak_perspective(shape: &Shape3D, pose: &CameraPose) -> Result<Keypoints2D> {
    if !shape.is_finite() {
        return Err(Error::InvalidInput("non-finite shape".into()));
    }
    pose.validate()?;
    let mut w = shape.matrix() * DMatrix::from_column_slice(3, 2, pose.r_xy().as_slice()) * pose.scale;
    let t = pose.translation.transpose();
    for mut row in w.row_iter_mut() {
        row += &t;
    }
    Ok(Keypoints2D(w))
}

/// Removes the keypoint centroid; returns the centered points and the
/// removed translation.
pub fn center(w: &Keypoints2D) -> (Keypoints2D, Vector2<f64>) {
    let (c, mean) = w.centered();
    (c, mean.transpose())
}

/// Closest rotation to `m` in Frobenius norm: `U diag(1, 1, det(U V^T)) V^T`.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if let Some(&bad) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            term: "rotation".into(),
            value: bad,
        });
    }
    let svd = m.svd(true, true);
    let sv = svd.singular_values;
    let s_max = sv.max();
    // Sorted descending: a rank <= 1 input has its two trailing values ~0.
    let tiny = 1e-12 * s_max.max(f64::MIN_POSITIVE);
    if s_max <= 0.0 || sv[1] <= tiny {
        return Err(Error::Degenerate(format!(
            "rotation projection needs rank >= 2, singular values {:?}",
            sv.as_slice()
        )));
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    Ok(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t)
}

/// Thin SVD of a `3 x 2` matrix and its orthonormal polar factor `U V^T`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StiefelPolar {
    pub q: Matrix3x2<f64>,
    pub u: Matrix3x2<f64>,
    pub sigma: Vector2<f64>,
    pub v: nalgebra::Matrix2<f64>,
}

/// `None` when `a` is numerically zero.
pub(crate) fn polar_3x2(a: &Matrix3x2<f64>) -> Option<StiefelPolar> {
    let svd = a.svd(true, true);
    let sigma = svd.singular_values;
    if !(sigma.max() > 1e-300) || !sigma.iter().all(|v| v.is_finite()) {
        return None;
    }
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    Some(StiefelPolar {
        q: u * v.transpose(),
        u,
        sigma,
        v,
    })
}

/// Inverse of a symmetric positive semidefinite `3 x 3` matrix, pseudo-inverse
/// when eigenvalues fall below `1e-12` of the largest.
pub(crate) fn sym_pinv3(g: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = nalgebra::SymmetricEigen::new(*g);
    let top = eig.eigenvalues.amax();
    let inv = eig.eigenvalues.map(|e| if e > 1e-12 * top && e > 0.0 { 1.0 / e } else { 0.0 });
    eig.eigenvectors * Matrix3::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// `[q1, q2, q1 x q2]`.
pub(crate) fn complete_rotation(q: &Matrix3x2<f64>) -> Matrix3<f64> {
    let c0 = q.column(0).into_owned();
    let c1 = q.column(1).into_owned();
    Matrix3::from_columns(&[c0, c1, c0.cross(&c1)])
}

/// Unchecked OnP fit used inside the network and the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnpFit {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    /// True when the shape or the cross-covariance was numerically zero, in
    /// which case `rotation` is the identity and `scale` is zero.
    pub degenerate: bool,
}

/// Closed-form OnP on centered inputs (`w_c`: `P x 2`, `s_c`: `P x 3`).
///
/// Solves the unconstrained affine fit `M = (S^T S)^+ S^T W`, projects `M`
/// onto the Stiefel manifold by its polar factor, completes the third row of
/// the rotation by a cross product and picks the scale minimizing the
/// residual for that rotation. Exact whenever `W` is a weak-perspective image
/// of `S`.
pub fn onp_closed_form(w_c: &DMatrix<f64>, s_c: &DMatrix<f64>) -> OnpFit {
    let gram: Matrix3<f64> = (s_c.transpose() * s_c).fixed_view::<3, 3>(0, 0).into_owned();
    let cross: Matrix3x2<f64> = (s_c.transpose() * w_c).fixed_view::<3, 2>(0, 0).into_owned();
    let degenerate = OnpFit {
        rotation: Matrix3::identity(),
        scale: 0.0,
        degenerate: true,
    };
    if !(gram.trace() > 0.0) {
        return degenerate;
    }
    let affine = sym_pinv3(&gram) * cross;
    let Some(polar) = polar_3x2(&affine) else {
        return degenerate;
    };
    let q = polar.q;
    let num = (q.transpose() * cross).trace();
    let den = (s_c * q).norm_squared();
    OnpFit {
        rotation: complete_rotation(&q),
        scale: num / den,
        degenerate: false,
    }
}

/// Orthographic-n-point: rotation and scale best explaining centered
/// keypoints `w` as a weak-perspective image of the centered shape `s`.
pub fn solve_onp(w: &Keypoints2D, s: &Shape3D) -> Result<CameraPose> {
    let p = w.num_points();
    if p != s.num_points() {
        return Err(Error::shape("solve_onp", format!("{p} shape points"), s.num_points()));
    }
    if p < 4 {
        return Err(Error::InvalidInput(format!("OnP needs at least 4 points, got {p}")));
    }
    if !w.is_finite() || !s.is_finite() {
        return Err(Error::InvalidInput("non-finite OnP input".into()));
    }
    let (wc, _) = w.centered();
    let (sc, _) = s.centered();
    let sv = sc.matrix().clone().svd(false, false).singular_values;
    if !(sv.min() > 1e-9 * sv.max()) {
        return Err(Error::Degenerate(format!(
            "OnP shape must have rank 3, singular values {:?}",
            sv.as_slice()
        )));
    }
    let fit = onp_closed_form(wc.matrix(), sc.matrix());
    if fit.degenerate {
        return Err(Error::Degenerate("observations carry no signal".into()));
    }
    let (rotation, scale) = refine_onp(wc.matrix(), sc.matrix(), &fit);
    if !(scale > 0.0) {
        return Err(Error::ReflectionAmbiguity(scale));
    }
    CameraPose::new(rotation, scale, Vector2::zeros())
}

fn onp_cost(w_c: &DMatrix<f64>, s_c: &DMatrix<f64>, r: &Matrix3<f64>, scale: f64) -> f64 {
    (w_c - s_c * r.fixed_columns::<2>(0) * scale).norm_squared()
}

const ONP_MAX_ITERS: usize = 100;

/// Levenberg-Marquardt on `SO(3) x R` from one start; returns the local
/// minimizer and its cost.
fn onp_local(w_c: &DMatrix<f64>, s_c: &DMatrix<f64>, r0: Matrix3<f64>, s0: f64) -> (Matrix3<f64>, f64, f64) {
    let p = w_c.nrows();
    let (mut r, mut scale) = (r0, s0);
    let mut cost = onp_cost(w_c, s_c, &r, scale);
    let mut mu = 1e-3;
    for _ in 0..ONP_MAX_ITERS {
        let sq = s_c * r.fixed_columns::<2>(0);
        let resid = w_c - &sq * scale;
        // Columns: d(pred)/d(delta_a) for a small left rotation, then d/ds.
        let mut j = DMatrix::zeros(2 * p, 4);
        for c in 0..2 {
            let q = r.column(c).into_owned();
            for a in 0..3 {
                let col = s_c * Vector3::ith(a, 1.0).cross(&q) * scale;
                j.view_mut((c * p, a), (p, 1)).copy_from(&col);
            }
            j.view_mut((c * p, 3), (p, 1)).copy_from(&sq.column(c));
        }
        let e = DMatrix::from_column_slice(2 * p, 1, resid.as_slice());
        let jtj = j.transpose() * &j;
        let jte = j.transpose() * e;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for d in 0..4 {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jte) else {
                mu *= 10.0;
                continue;
            };
            let delta = Vector3::new(step[0], step[1], step[2]);
            let rn = axis_angle(&delta, delta.norm()) * r;
            let sn = scale + step[3];
            let cn = onp_cost(w_c, s_c, &rn, sn);
            if cn < cost {
                let gain = cost - cn;
                r = rn;
                scale = sn;
                cost = cn;
                mu = (mu / 3.0).max(1e-12);
                improved = gain > 1e-15 * cost.max(f64::MIN_POSITIVE) && step.norm() > 1e-15;
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (r, scale, cost)
}

/// Polishes the closed-form OnP estimate into a minimizer of
/// `|W_c - s S_c R_xy|_F`, trying a few sign-symmetric starts.
fn refine_onp(w_c: &DMatrix<f64>, s_c: &DMatrix<f64>, fit: &OnpFit) -> (Matrix3<f64>, f64) {
    let cross: Matrix3x2<f64> = (s_c.transpose() * w_c).fixed_view::<3, 2>(0, 0).into_owned();
    let mut starts = vec![fit.rotation];
    if let Some(polar) = polar_3x2(&cross) {
        starts.push(complete_rotation(&polar.q));
    }
    let flips = [Vector3::new(1.0, -1.0, -1.0), Vector3::new(-1.0, 1.0, -1.0)];
    for i in 0..starts.len() {
        for f in &flips {
            starts.push(starts[i] * Matrix3::from_diagonal(f));
        }
    }
    let mut best = (fit.rotation, fit.scale, onp_cost(w_c, s_c, &fit.rotation, fit.scale));
    for r0 in starts {
        let sq = s_c * r0.fixed_columns::<2>(0);
        let den = sq.norm_squared();
        let s0 = if den > 0.0 { sq.dot(w_c) / den } else { 0.0 };
        let cand = onp_local(w_c, s_c, r0, s0);
        if cand.2 < best.2 {
            best = cand;
        }
    }
    let (mut r, mut scale, _) = best;
    if scale < 0.0 {
        // -Q is the same image with a positive scale.
        r *= Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        scale = -scale;
    }
    (nearest_rotation(&r).unwrap_or(r), scale)
}

/// Result of a similarity Procrustes alignment `a * X * Q + 1 * c^T`.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub aligned: Shape3D,
    pub scale: f64,
    /// Orthogonal, possibly a reflection.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub reflection: bool,
}

/// Aligns `x` onto `y` with the similarity (reflections allowed) minimizing
/// the Frobenius residual.
pub fn procrustes_align(x: &Shape3D, y: &Shape3D) -> Result<Alignment> {
    if x.num_points() != y.num_points() {
        return Err(Error::shape("procrustes_align", x.num_points(), y.num_points()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidInput("non-finite shape".into()));
    }
    let (xc, xm) = x.centered();
    let (yc, ym) = y.centered();
    let norm_x = xc.norm_squared();
    if !(norm_x > 1e-300) || norm_x <= 1e-24 * x.norm_squared() {
        return Err(Error::Degenerate("all source points coincide".into()));
    }
    let m: Matrix3<f64> = (xc.transpose() * yc.matrix()).fixed_view::<3, 3>(0, 0).into_owned();
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let rotation = u * v_t;
    let scale = svd.singular_values.sum() / norm_x;
    let translation = (ym - xm * rotation * scale).transpose();
    let mut aligned = xc.matrix() * DMatrix::from_column_slice(3, 3, rotation.as_slice()) * scale;
    let t = ym;
    for mut row in aligned.row_iter_mut() {
        row += &t;
    }
    Ok(Alignment {
        aligned: Shape3D(aligned),
        scale,
        rotation,
        translation,
        reflection: rotation.determinant() < 0.0,
    })
}
