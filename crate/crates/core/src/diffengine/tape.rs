//! Matrix-valued reverse-mode tape over the fixed operation set the model
//! needs.

use nalgebra::{DMatrix, Matrix2, Matrix3, Matrix3x2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{self, StiefelPolar};
use crate::neural_prior;

/// Relative floor applied to singular-value denominators in SVD backward
/// passes.
pub const SVD_GRAD_FLOOR: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct NearestRotationCache {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: Vector3<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a^T * b`
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// Matrix times a `1 x 1` node.
    MulScalar(Var, Var),
    /// Quotient of two `1 x 1` nodes.
    Div(Var, Var),
    /// Column-major reshape.
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    CenterRows(Var),
    BlockShrink(Var, Var),
    VecShrink(Var, Var),
    Relu(Var),
    KronTMul(Var, Var),
    KronMul(Var, Var),
    NearestRotation(Var, Box<NearestRotationCache>),
    Polar(Var, Option<Box<StiefelPolar>>),
    SymInverse(Var),
    CompleteRotation(Var),
    FrobNorm(Var),
    SqNorm(Var),
    Dot(Var, Var),
    Sum(Var),
    BlockNormSum(Var),
    /// A value computed outside the engine; has no backward rule.
    Opaque(&'static str, Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations and evaluates exact reverse-mode gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<DMatrix<f64>>>,
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn to_dyn<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(scalar(v))
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Records a value produced outside the engine from `inputs`. Gradients
    /// that reach it fail with [`Error::UnsupportedOp`].
    pub fn opaque(&mut self, name: &'static str, value: DMatrix<f64>, inputs: &[Var]) -> Var {
        self.push(value, Op::Opaque(name, inputs.to_vec()), inputs)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).tr_mul(self.value(b));
        self.push(value, Op::MatMulTn(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let value = self.value(a) * self.scalar(s);
        self.push(value, Op::MulScalar(a, s), &[a, s])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = scalar(self.scalar(a) / self.scalar(b));
        self.push(value, Op::Div(a, b), &[a, b])
    }

    /// Column-major reshape to `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size");
        let value = DMatrix::from_column_slice(rows, cols, src.as_slice());
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).rows(start, len).into_owned();
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).columns(start, len).into_owned();
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    /// Subtracts column means.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let value = center_columns(self.value(a));
        self.push(value, Op::CenterRows(a), &[a])
    }

    /// Group shrinkage of `3 x 2` blocks by the `1 x 1` threshold `lambda`.
    pub fn block_shrink(&mut self, psi: Var, lambda: Var) -> Var {
        let value = neural_prior::block_soft_threshold(self.value(psi), self.scalar(lambda));
        self.push(value, Op::BlockShrink(psi, lambda), &[psi, lambda])
    }

    /// `max(0, x - lambda)` elementwise.
    pub fn vec_shrink(&mut self, x: Var, lambda: Var) -> Var {
        let l = self.scalar(lambda);
        let value = self.value(x).map(|v| (v - l).max(0.0));
        self.push(value, Op::VecShrink(x, lambda), &[x, lambda])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// `(D kron I3)^T * psi`.
    pub fn kron_t_mul(&mut self, d: Var, psi: Var) -> Var {
        let value = neural_prior::kron_t_mul(self.value(d), self.value(psi));
        self.push(value, Op::KronTMul(d, psi), &[d, psi])
    }

    /// `(D kron I3) * psi`.
    pub fn kron_mul(&mut self, d: Var, psi: Var) -> Var {
        let value = neural_prior::kron_mul(self.value(d), self.value(psi));
        self.push(value, Op::KronMul(d, psi), &[d, psi])
    }

    /// Projection of a `3 x 3` node onto SO(3).
    pub fn nearest_rotation(&mut self, m: Var) -> Result<Var> {
        let mv: Matrix3<f64> = self.value(m).fixed_view::<3, 3>(0, 0).into_owned();
        let rotation = geometry::nearest_rotation(&mv)?;
        let svd = mv.svd(true, true);
        let mut u = svd.u.expect("u requested");
        let v = svd.v_t.expect("v_t requested").transpose();
        let mut sigma = svd.singular_values;
        if (u * v.transpose()).determinant() < 0.0 {
            u.column_mut(2).neg_mut();
            sigma[2] = -sigma[2];
        }
        let cache = NearestRotationCache { u, v, sigma };
        Ok(self.push(to_dyn(&rotation), Op::NearestRotation(m, Box::new(cache)), &[m]))
    }

    /// Orthonormal polar factor of a `3 x 2` node. A numerically zero input
    /// yields the first two identity columns with zero gradient.
    pub fn polar(&mut self, a: Var) -> Var {
        let av: Matrix3x2<f64> = self.value(a).fixed_view::<3, 2>(0, 0).into_owned();
        match geometry::polar_3x2(&av) {
            Some(p) => {
                let value = to_dyn(&p.q);
                self.push(value, Op::Polar(a, Some(Box::new(p))), &[a])
            }
            None => {
                let value = to_dyn(&Matrix3x2::identity());
                self.push(value, Op::Polar(a, None), &[a])
            }
        }
    }

    /// (Pseudo-)inverse of a symmetric PSD `3 x 3` node.
    pub fn sym_inverse(&mut self, g: Var) -> Var {
        let gv: Matrix3<f64> = self.value(g).fixed_view::<3, 3>(0, 0).into_owned();
        let value = to_dyn(&geometry::sym_pinv3(&gv));
        self.push(value, Op::SymInverse(g), &[g])
    }

    /// `[q1, q2, q1 x q2]` from a `3 x 2` node.
    pub fn complete_rotation(&mut self, q: Var) -> Var {
        let qv: Matrix3x2<f64> = self.value(q).fixed_view::<3, 2>(0, 0).into_owned();
        let value = to_dyn(&geometry::complete_rotation(&qv));
        self.push(value, Op::CompleteRotation(q), &[q])
    }

    pub fn frob_norm(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).norm());
        self.push(value, Op::FrobNorm(a), &[a])
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).norm_squared());
        self.push(value, Op::SqNorm(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let value = scalar(self.value(a).dot(self.value(b)));
        self.push(value, Op::Dot(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Sum over `3 x 2` blocks of their Frobenius norms.
    pub fn block_norm_sum(&mut self, psi: Var) -> Var {
        let p = self.value(psi);
        let value = scalar((0..p.nrows() / 3).map(|b| neural_prior::block_norm(p, b)).sum());
        self.push(value, Op::BlockNormSum(psi), &[psi])
    }

    /// Sum of a list of scalar nodes; zero constant when empty.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return self.constant_scalar(0.0);
        };
        iter.fold(first, |acc, &t| self.add(acc, t))
    }

    /// Back-propagates from the scalar node `output`. Previous gradients are
    /// discarded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::InvalidInput("backward needs a scalar output".into()));
        }
        let n = output.0 + 1;
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(scalar(1.0));
        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last [`Tape::backward`] output with respect to `v`
    /// (zero when `v` did not influence it).
    pub fn grad(&self, v: Var) -> DMatrix<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                DMatrix::zeros(r, c)
            }
        }
    }

    fn accumulate(&mut self, v: Var, g: DMatrix<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, idx: usize, g: &DMatrix<f64>) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let ga = g * self.value(b).transpose();
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = self.value(a).tr_mul(g);
                    self.accumulate(b, gb);
                }
            }
            Op::MatMulTn(a, b) => {
                if self.needs(a) {
                    let ga = self.value(b) * g.transpose();
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = self.value(a) * g;
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, -g);
            }
            Op::Scale(a, c) => self.accumulate(a, g * c),
            Op::MulScalar(a, s) => {
                if self.needs(a) {
                    let ga = g * self.scalar(s);
                    self.accumulate(a, ga);
                }
                if self.needs(s) {
                    let gs = scalar(self.value(a).dot(g));
                    self.accumulate(s, gs);
                }
            }
            Op::Div(a, b) => {
                let (av, bv, gv) = (self.scalar(a), self.scalar(b), g[(0, 0)]);
                self.accumulate(a, scalar(gv / bv));
                self.accumulate(b, scalar(-gv * av / (bv * bv)));
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(a, DMatrix::from_column_slice(r, c, g.as_slice()));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(a).shape();
                let mut ga = DMatrix::zeros(r, c);
                ga.rows_mut(start, g.nrows()).copy_from(g);
                self.accumulate(a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(a).shape();
                let mut ga = DMatrix::zeros(r, c);
                ga.columns_mut(start, g.ncols()).copy_from(g);
                self.accumulate(a, ga);
            }
            Op::CenterRows(a) => self.accumulate(a, center_columns(g)),
            Op::BlockShrink(psi, lambda) => {
                let l = self.scalar(lambda);
                let p = self.value(psi);
                let mut gp = DMatrix::zeros(p.nrows(), p.ncols());
                let mut gl = 0.0;
                for b in 0..p.nrows() / 3 {
                    let blk = p.view((3 * b, 0), (3, p.ncols()));
                    let gblk = g.view((3 * b, 0), (3, p.ncols()));
                    let n = blk.norm();
                    if n > l {
                        let inner = blk.dot(&gblk);
                        let out = gblk * (1.0 - l / n) + blk * (l * inner / (n * n * n));
                        gp.view_mut((3 * b, 0), (3, p.ncols())).copy_from(&out);
                        gl -= inner / n;
                    }
                }
                self.accumulate(psi, gp);
                self.accumulate(lambda, scalar(gl));
            }
            Op::VecShrink(x, lambda) => {
                let l = self.scalar(lambda);
                let xv = self.value(x);
                let mask = xv.map(|v| if v > l { 1.0 } else { 0.0 });
                let gx = g.component_mul(&mask);
                let gl = -gx.sum();
                self.accumulate(x, gx);
                self.accumulate(lambda, scalar(gl));
            }
            Op::Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(x, g.component_mul(&mask));
            }
            Op::KronTMul(d, psi) => {
                let (gd, gp) = kron_backward(self.value(d), self.value(psi), g, true);
                self.accumulate(d, gd);
                self.accumulate(psi, gp);
            }
            Op::KronMul(d, psi) => {
                let (gd, gp) = kron_backward(self.value(d), self.value(psi), g, false);
                self.accumulate(d, gd);
                self.accumulate(psi, gp);
            }
            Op::NearestRotation(m, cache) => {
                let gr: Matrix3<f64> = g.fixed_view::<3, 3>(0, 0).into_owned();
                let gt = cache.u.transpose() * gr * cache.v;
                let floor = SVD_GRAD_FLOOR * cache.sigma[0].abs();
                let mut x = Matrix3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        if i != j {
                            let den = (cache.sigma[i] + cache.sigma[j]).max(floor);
                            x[(i, j)] = (gt[(i, j)] - gt[(j, i)]) / den;
                        }
                    }
                }
                let gm = cache.u * x * cache.v.transpose();
                self.accumulate(m, to_dyn(&gm));
            }
            Op::Polar(a, cache) => {
                let Some(p) = cache else {
                    return Ok(());
                };
                let gq: Matrix3x2<f64> = g.fixed_view::<3, 2>(0, 0).into_owned();
                let floor = SVD_GRAD_FLOOR * p.sigma.max();
                let gt = p.u.transpose() * gq * p.v;
                let den = (p.sigma[0] + p.sigma[1]).max(floor);
                let skew = (gt[(0, 1)] - gt[(1, 0)]) / den;
                let inner = Matrix2::new(0.0, skew, -skew, 0.0);
                let sinv = Matrix2::from_diagonal(&p.sigma.map(|s| 1.0 / s.max(floor)));
                let proj = Matrix3::identity() - p.u * p.u.transpose();
                let ga = p.u * inner * p.v.transpose() + proj * gq * p.v * sinv * p.v.transpose();
                self.accumulate(a, to_dyn(&ga));
            }
            Op::SymInverse(gvar) => {
                let y = self.nodes[idx].value.clone();
                let gg = -(&y * g * &y);
                self.accumulate(gvar, gg);
            }
            Op::CompleteRotation(q) => {
                let qv = self.value(q);
                let q1 = Vector3::new(qv[(0, 0)], qv[(1, 0)], qv[(2, 0)]);
                let q2 = Vector3::new(qv[(0, 1)], qv[(1, 1)], qv[(2, 1)]);
                let g3 = Vector3::new(g[(0, 2)], g[(1, 2)], g[(2, 2)]);
                let g1 = Vector3::new(g[(0, 0)], g[(1, 0)], g[(2, 0)]) + q2.cross(&g3);
                let g2 = Vector3::new(g[(0, 1)], g[(1, 1)], g[(2, 1)]) + g3.cross(&q1);
                let gq = DMatrix::from_fn(3, 2, |r, c| if c == 0 { g1[r] } else { g2[r] });
                self.accumulate(q, gq);
            }
            Op::FrobNorm(a) => {
                let av = self.value(a);
                let n = av.norm();
                if n > 0.0 {
                    let ga = av * (g[(0, 0)] / n);
                    self.accumulate(a, ga);
                }
            }
            Op::SqNorm(a) => {
                let ga = self.value(a) * (2.0 * g[(0, 0)]);
                self.accumulate(a, ga);
            }
            Op::Dot(a, b) => {
                let gv = g[(0, 0)];
                let ga = self.value(b) * gv;
                let gb = self.value(a) * gv;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::BlockNormSum(psi) => {
                let p = self.value(psi);
                let mut gp = DMatrix::zeros(p.nrows(), p.ncols());
                for b in 0..p.nrows() / 3 {
                    let blk = p.view((3 * b, 0), (3, p.ncols()));
                    let n = blk.norm();
                    if n > 0.0 {
                        gp.view_mut((3 * b, 0), (3, p.ncols())).copy_from(&(blk * (g[(0, 0)] / n)));
                    }
                }
                self.accumulate(psi, gp);
            }
            Op::Opaque(name, inputs) => {
                if inputs.iter().any(|&v| self.needs(v)) {
                    return Err(Error::UnsupportedOp(name.to_string()));
                }
            }
        }
        Ok(())
    }
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows().max(1) as f64;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

// Per column j, the block code is a 3 x B matrix Z_j acted on from the right:
// transposed form Y_j = Z_j D, plain form Y_j = Z_j D^T.
fn kron_backward(d: &DMatrix<f64>, psi: &DMatrix<f64>, g: &DMatrix<f64>, transposed: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    let (w_in, w_out) = if transposed { (d.nrows(), d.ncols()) } else { (d.ncols(), d.nrows()) };
    let mut gd = DMatrix::zeros(d.nrows(), d.ncols());
    let mut gp = DMatrix::zeros(psi.nrows(), psi.ncols());
    for j in 0..psi.ncols() {
        let z = DMatrix::from_column_slice(3, w_in, &psi.as_slice()[j * 3 * w_in..(j + 1) * 3 * w_in]);
        let gy = DMatrix::from_column_slice(3, w_out, &g.as_slice()[j * 3 * w_out..(j + 1) * 3 * w_out]);
        let gz = if transposed {
            gd += z.tr_mul(&gy);
            &gy * d.transpose()
        } else {
            gd += gy.tr_mul(&z);
            &gy * d
        };
        gp.as_mut_slice()[j * 3 * w_in..(j + 1) * 3 * w_in].copy_from_slice(gz.as_slice());
    }
    (gd, gp)
}
