//! Hierarchical sparse shape prior.
//!
//! Each view is encoded by unrolled shrinkage layers into block codes
//! (`3B x 2`, read as `B` stacked `3 x 2` blocks), the last block code is
//! split by the rotation-factorization (RF) layer into a rotation and a
//! nonnegative code, codes are sum-pooled across views and the pooled code is
//! decoded into one canonical shape through the same dictionaries.

mod stack;

pub use stack::{DictionaryStack, INITIAL_LAMBDA};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{self, Keypoints2D, OnpFit, Shape3D};

/// Block code of one layer, `3B x 2`.
pub type BlockCode = DMatrix<f64>;

/// Nonnegative rotation-invariant code.
pub type VectorCode = DVector<f64>;

/// Group shrinkage of every `3 x 2` block: `B * max(0, 1 - lambda / |B|_F)`.
pub fn block_soft_threshold(psi: &BlockCode, lambda: f64) -> BlockCode {
    debug_assert!(psi.nrows() % 3 == 0);
    let mut out = psi.clone();
    for b in 0..psi.nrows() / 3 {
        let norm = block_norm(psi, b);
        let gain = if norm > lambda { 1.0 - lambda / norm } else { 0.0 };
        for r in 3 * b..3 * b + 3 {
            for c in 0..psi.ncols() {
                out[(r, c)] *= gain;
            }
        }
    }
    out
}

/// Frobenius norm of block `b`.
pub fn block_norm(psi: &BlockCode, b: usize) -> f64 {
    psi.view((3 * b, 0), (3, psi.ncols())).norm()
}

/// Number of blocks with nonzero norm.
pub fn count_active_blocks(psi: &BlockCode) -> usize {
    (0..psi.nrows() / 3).filter(|&b| block_norm(psi, b) > 0.0).count()
}

/// `(D kron I3)^T * psi` for `D: B x B'` and `psi: 3B x 2`.
pub fn kron_t_mul(d: &DMatrix<f64>, psi: &BlockCode) -> BlockCode {
    kron_apply(psi, d.nrows(), d.ncols(), |z| z * d)
}

/// `(D kron I3) * psi` for `D: B x B'` and `psi: 3B' x 2`.
pub fn kron_mul(d: &DMatrix<f64>, psi: &BlockCode) -> BlockCode {
    kron_apply(psi, d.ncols(), d.nrows(), |z| z * d.transpose())
}

// Column j of a 3B x 2 block code is a column-major 3 x B matrix whose
// column b is block b's j-th column; Kronecker products with I3 act on it
// from the right.
fn kron_apply(
    psi: &BlockCode,
    width_in: usize,
    width_out: usize,
    apply: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
) -> BlockCode {
    assert_eq!(psi.nrows(), 3 * width_in, "block code height");
    let mut out = DMatrix::zeros(3 * width_out, psi.ncols());
    let n_in = 3 * width_in;
    let n_out = 3 * width_out;
    for j in 0..psi.ncols() {
        let z = DMatrix::from_column_slice(3, width_in, &psi.as_slice()[j * n_in..(j + 1) * n_in]);
        let y = apply(&z);
        out.as_mut_slice()[j * n_out..(j + 1) * n_out].copy_from_slice(y.as_slice());
    }
    out
}

/// `P x 3B` reshape of the first-layer dictionary.
pub fn first_layer_reshape(d1: &DMatrix<f64>, num_points: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(num_points, d1.len() / num_points, d1.as_slice())
}

/// Runs the encoder on centered keypoints, returning every layer's block code.
pub fn encode_view(w: &Keypoints2D, theta: &DictionaryStack) -> Result<Vec<BlockCode>> {
    if w.num_points() != theta.num_points() {
        return Err(Error::shape("encode_view", theta.num_points(), w.num_points()));
    }
    let d_sharp = first_layer_reshape(&theta.dictionaries[0], theta.num_points());
    let mut codes = Vec::with_capacity(theta.num_layers());
    codes.push(block_soft_threshold(&(d_sharp.transpose() * w.matrix()), theta.lambdas[0]));
    for l in 1..theta.num_layers() {
        let pre = kron_t_mul(&theta.dictionaries[l], &codes[l - 1]);
        codes.push(block_soft_threshold(&pre, theta.lambdas[l]));
    }
    Ok(codes)
}

/// Output of the RF layer before the nonlinearities.
#[derive(Debug, Clone)]
pub struct RfOutput {
    pub rotation_params: Matrix3<f64>,
    pub code_raw: DVector<f64>,
}

/// Dense RF map applied to the flattened last-layer block code.
pub fn rf_linear(psi_last: &BlockCode, theta: &DictionaryStack) -> Result<RfOutput> {
    let b = theta.last_width();
    if psi_last.shape() != (3 * b, 2) {
        return Err(Error::shape("factorize_rotation", format!("{} x 2", 3 * b), psi_last.nrows()));
    }
    if !psi_last.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite block code".into()));
    }
    let flat = DVector::from_column_slice(psi_last.as_slice());
    let out = &theta.rf_weight * flat + &theta.rf_bias;
    Ok(RfOutput {
        rotation_params: Matrix3::from_column_slice(&out.as_slice()[..9]),
        code_raw: out.rows(9, b).into_owned(),
    })
}

/// Splits the last block code into a rotation and a nonnegative code.
pub fn factorize_rotation(psi_last: &BlockCode, theta: &DictionaryStack) -> Result<(Matrix3<f64>, VectorCode)> {
    let out = rf_linear(psi_last, theta)?;
    let rotation = geometry::nearest_rotation(&out.rotation_params)?;
    Ok((rotation, out.code_raw.map(|v| v.max(0.0))))
}

/// Correctly rounded sum (Shewchuk partials with a half-way fix-up), so the
/// result does not depend on the order of `values`.
pub fn exact_sum(values: &[f64]) -> f64 {
    if !values.iter().all(|v| v.is_finite()) {
        return values.iter().sum();
    }
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Sum pooling across views. Each coordinate is a correctly rounded sum,
/// which makes pooling exactly invariant to view order and exactly doubled by
/// duplicating every view.
pub fn pool_codes(codes: &[VectorCode]) -> Result<VectorCode> {
    let first = codes
        .first()
        .ok_or_else(|| Error::InvalidInput("pooling needs at least one code".into()))?;
    if let Some(c) = codes.iter().find(|c| c.len() != first.len()) {
        return Err(Error::shape("pool_codes", first.len(), c.len()));
    }
    let mut column = vec![0.0; codes.len()];
    Ok(VectorCode::from_fn(first.len(), |i, _| {
        for (slot, c) in column.iter_mut().zip(codes) {
            *slot = c[i];
        }
        exact_sum(&column)
    }))
}

/// Decodes a pooled code into the canonical shape.
pub fn decode_shape(code: &VectorCode, theta: &DictionaryStack) -> Result<Shape3D> {
    if code.len() != theta.last_width() {
        return Err(Error::shape("decode_shape", theta.last_width(), code.len()));
    }
    let mut psi = code.clone();
    for l in (1..theta.num_layers()).rev() {
        let lambda = theta.lambdas[l];
        psi = (&theta.dictionaries[l] * psi).map(|v| (v - lambda).max(0.0));
    }
    let s = &theta.dictionaries[0] * psi;
    Shape3D::new(DMatrix::from_column_slice(theta.num_points(), 3, s.as_slice()))
}

/// Per-view quantities produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ViewFit {
    /// Removed keypoint centroid.
    pub translation: Vector2<f64>,
    /// RMS radius of the centered keypoints; the encoder sees `W / rms`.
    pub input_scale: f64,
    pub block_codes: Vec<BlockCode>,
    /// Rotation predicted by the RF layer.
    pub rf_rotation: Matrix3<f64>,
    pub code: VectorCode,
    /// OnP pose of the decoded shape against this view.
    pub onp: OnpFit,
    /// `|W_c - s* S_c R*_xy|_F` in keypoint units.
    pub residual: f64,
}

impl ViewFit {
    pub fn pose(&self) -> Result<geometry::CameraPose> {
        if self.onp.degenerate || !(self.onp.scale > 0.0) {
            return Err(Error::ReflectionAmbiguity(self.onp.scale));
        }
        geometry::CameraPose::new(self.onp.rotation, self.onp.scale, self.translation)
    }
}

/// Multi-view reconstruction of one instance.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub shape: Shape3D,
    pub pooled_code: VectorCode,
    pub views: Vec<ViewFit>,
}

impl Reconstruction {
    pub fn reprojection_sum(&self) -> f64 {
        self.views.iter().map(|v| v.residual).sum()
    }
}

/// Centers a view and scales it to unit RMS radius.
pub fn normalize_view(w: &Keypoints2D) -> (Keypoints2D, Vector2<f64>, f64) {
    let (wc, t) = geometry::center(w);
    let rms = (wc.norm_squared() / wc.num_points().max(1) as f64).sqrt();
    let scale = if rms > 0.0 { rms } else { 1.0 };
    let normalized = Keypoints2D::new(wc.matrix() / scale).expect("two columns");
    (normalized, t, scale)
}

/// Reconstructs one instance from its `K >= 1` views.
pub fn forward(views: &[Keypoints2D], theta: &DictionaryStack) -> Result<Reconstruction> {
    if views.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, have: 0 });
    }
    let p = theta.num_points();
    let mut fits = Vec::with_capacity(views.len());
    let mut centered = Vec::with_capacity(views.len());
    for w in views {
        if w.num_points() != p {
            return Err(Error::shape("forward", p, w.num_points()));
        }
        if !w.is_finite() {
            return Err(Error::InvalidInput("non-finite keypoints".into()));
        }
        let (normalized, translation, input_scale) = normalize_view(w);
        let block_codes = encode_view(&normalized, theta)?;
        let (rf_rotation, code) = factorize_rotation(block_codes.last().expect("L >= 1"), theta)?;
        centered.push(normalized.matrix() * input_scale);
        fits.push(ViewFit {
            translation,
            input_scale,
            block_codes,
            rf_rotation,
            code,
            onp: OnpFit {
                rotation: Matrix3::identity(),
                scale: 0.0,
                degenerate: true,
            },
            residual: 0.0,
        });
    }
    let codes: Vec<VectorCode> = fits.iter().map(|f| f.code.clone()).collect();
    let pooled_code = pool_codes(&codes)?;
    let shape = decode_shape(&pooled_code, theta)?;
    let (s_c, _) = shape.centered();
    for (fit, w_c) in fits.iter_mut().zip(&centered) {
        fit.onp = geometry::onp_closed_form(w_c, s_c.matrix());
        let pred = s_c.matrix() * fit.onp.rotation.fixed_columns::<2>(0) * fit.onp.scale;
        fit.residual = (w_c - pred).norm();
    }
    Ok(Reconstruction {
        shape,
        pooled_code,
        views: fits,
    })
}
