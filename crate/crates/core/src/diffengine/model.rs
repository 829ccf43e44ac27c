use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Keypoints2D};
use crate::neural_prior::{self, DictionaryStack};

use super::params::{ParamLayout, ParamVector};
use super::tape::{Tape, Var};

/// Weights of the regularizers added to the mean reprojection error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_sparse: f64,
    pub w_dict: f64,
    /// Weight of the RF-rotation vs OnP-rotation agreement term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_sparse: 1.0,
            w_dict: 1.0,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    /// Reprojection only.
    pub fn reprojection_only() -> Self {
        Self {
            w_sparse: 0.0,
            w_dict: 0.0,
            beta: 0.0,
        }
    }
}

/// How the OnP pose enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnpMode {
    /// Back-propagate through the closed-form solver.
    #[default]
    Differentiate,
    /// Treat the pose of each view as a constant for the step.
    Frozen,
}

/// Loss terms averaged over all `(instance, view)` pairs, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reprojection: f64,
    pub sparsity: f64,
    pub dictionary: f64,
    pub rotation: f64,
    pub total: f64,
}

/// Tape leaves holding every parameter of a stack.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub dictionaries: Vec<Var>,
    pub lambdas: Vec<Var>,
    pub rf_weight: Var,
    pub rf_bias: Var,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, theta: &DictionaryStack) -> Self {
        let dictionaries = theta.dictionaries.iter().map(|d| tape.param(d.clone())).collect();
        let lambdas = theta
            .lambdas
            .iter()
            .map(|&l| tape.param(DMatrix::from_element(1, 1, l)))
            .collect();
        let rf_weight = tape.param(theta.rf_weight.clone());
        let rf_bias = tape.param(DMatrix::from_column_slice(theta.rf_bias.len(), 1, theta.rf_bias.as_slice()));
        Self {
            dictionaries,
            lambdas,
            rf_weight,
            rf_bias,
        }
    }

    /// Gradients after [`Tape::backward`], in [`ParamVector`] order.
    pub fn gradient(&self, tape: &Tape) -> ParamVector {
        let mut values = Vec::new();
        for &d in &self.dictionaries {
            values.extend_from_slice(tape.grad(d).as_slice());
        }
        for &l in &self.lambdas {
            values.push(tape.grad(l)[(0, 0)]);
        }
        values.extend_from_slice(tape.grad(self.rf_weight).as_slice());
        values.extend_from_slice(tape.grad(self.rf_bias).as_slice());
        ParamVector { values }
    }
}

/// Evaluates `loss_fn` on a fresh tape and returns its value with the
/// gradient with respect to every parameter of `theta`.
pub fn grad<F>(theta: &DictionaryStack, loss_fn: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, theta);
    let out = loss_fn(&mut tape, &vars)?;
    let value = tape.scalar(out);
    tape.backward(out)?;
    let g = vars.gradient(&tape);
    debug_assert_eq!(g.len(), ParamLayout::of(theta).len());
    Ok((value, g))
}

/// Unweighted per-instance sums of each loss term.
#[derive(Debug, Clone, Copy)]
pub struct InstanceTerms {
    pub reprojection: Var,
    pub sparsity: Var,
    pub dictionary: Var,
    pub rotation: Option<Var>,
}

struct ViewNodes {
    w_c: Var,
    codes: Vec<Var>,
    rotation_params: Var,
}

/// Records the forward pass of one instance and its loss terms.
pub fn instance_terms(
    tape: &mut Tape,
    vars: &ParamVars,
    theta: &DictionaryStack,
    views: &[Keypoints2D],
    with_rotation: bool,
    mode: OnpMode,
) -> Result<InstanceTerms> {
    if views.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, have: 0 });
    }
    let p = theta.num_points();
    let big_l = theta.num_layers();
    let b_last = theta.last_width();
    let d_sharp = tape.reshape(vars.dictionaries[0], p, 3 * theta.widths()[0]);

    let mut nodes = Vec::with_capacity(views.len());
    let mut pooled: Option<Var> = None;
    for w in views {
        if w.num_points() != p {
            return Err(Error::shape("loss_total", p, w.num_points()));
        }
        if !w.is_finite() {
            return Err(Error::InvalidInput("non-finite keypoints".into()));
        }
        let (normalized, _, input_scale) = neural_prior::normalize_view(w);
        let w_n = tape.constant(normalized.matrix().clone());
        let w_c = tape.constant(normalized.matrix() * input_scale);

        let pre = tape.matmul_tn(d_sharp, w_n);
        let mut codes = vec![tape.block_shrink(pre, vars.lambdas[0])];
        for l in 1..big_l {
            let pre = tape.kron_t_mul(vars.dictionaries[l], codes[l - 1]);
            codes.push(tape.block_shrink(pre, vars.lambdas[l]));
        }
        let flat = tape.reshape(codes[big_l - 1], 6 * b_last, 1);
        let lin = tape.matmul(vars.rf_weight, flat);
        let out = tape.add(lin, vars.rf_bias);
        let raw = tape.slice_rows(out, 9, b_last);
        let code = tape.relu(raw);
        let rotation_params = tape.slice_rows(out, 0, 9);
        pooled = Some(match pooled {
            None => code,
            Some(acc) => tape.add(acc, code),
        });
        nodes.push(ViewNodes {
            w_c,
            codes,
            rotation_params,
        });
    }

    let mut psi = pooled.expect("at least one view");
    for l in (1..big_l).rev() {
        let lin = tape.matmul(vars.dictionaries[l], psi);
        psi = tape.vec_shrink(lin, vars.lambdas[l]);
    }
    let s_flat = tape.matmul(vars.dictionaries[0], psi);
    let s = tape.reshape(s_flat, p, 3);
    let s_c = tape.center_rows(s);
    if let Some(&bad) = tape.value(s_c).iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            term: "shape".into(),
            value: bad,
        });
    }

    let mut reproj = Vec::with_capacity(views.len());
    let mut sparse = Vec::new();
    let mut dict = Vec::new();
    let mut rot = Vec::new();
    for view in &nodes {
        let fit = geometry::onp_closed_form(tape.value(view.w_c), tape.value(s_c));
        let q = if fit.degenerate {
            reproj.push(tape.frob_norm(view.w_c));
            None
        } else {
            let gram = tape.matmul_tn(s_c, s_c);
            let gram_inv = tape.sym_inverse(gram);
            let cross = tape.matmul_tn(s_c, view.w_c);
            let affine = tape.matmul(gram_inv, cross);
            let mut q = tape.polar(affine);
            if mode == OnpMode::Frozen {
                q = tape.detach(q);
            }
            let sq = tape.matmul(s_c, q);
            let num = tape.dot(view.w_c, sq);
            let den = tape.sq_norm(sq);
            let mut scale = tape.div(num, den);
            if mode == OnpMode::Frozen {
                scale = tape.detach(scale);
            }
            let pred = tape.mul_scalar(sq, scale);
            let diff = tape.sub(view.w_c, pred);
            reproj.push(tape.frob_norm(diff));
            Some(q)
        };

        for (l, &code) in view.codes.iter().enumerate() {
            let norms = tape.block_norm_sum(code);
            sparse.push(tape.mul_scalar(norms, vars.lambdas[l]));
        }
        for l in 1..big_l {
            let recon = tape.kron_mul(vars.dictionaries[l], view.codes[l]);
            let diff = tape.sub(view.codes[l - 1], recon);
            dict.push(tape.frob_norm(diff));
        }

        if with_rotation {
            let m = tape.reshape(view.rotation_params, 3, 3);
            let r = tape.nearest_rotation(m)?;
            let r_star = match q {
                Some(q) => tape.complete_rotation(q),
                None => tape.constant(DMatrix::identity(3, 3)),
            };
            let diff = tape.sub(r, r_star);
            rot.push(tape.sq_norm(diff));
        }
    }

    Ok(InstanceTerms {
        reprojection: tape.sum_scalars(&reproj),
        sparsity: tape.sum_scalars(&sparse),
        dictionary: tape.sum_scalars(&dict),
        rotation: if with_rotation { Some(tape.sum_scalars(&rot)) } else { None },
    })
}

/// Records the weighted loss of a batch of instances, averaged over all
/// `(instance, view)` pairs. Returns the total node and the unweighted terms.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    theta: &DictionaryStack,
    instances: &[&[Keypoints2D]],
    weights: &LossWeights,
    mode: OnpMode,
) -> Result<(Var, LossTerms)> {
    let with_rotation = weights.beta != 0.0;
    let mut per = Vec::with_capacity(instances.len());
    let mut pairs = 0usize;
    for views in instances {
        per.push(instance_terms(tape, vars, theta, views, with_rotation, mode)?);
        pairs += views.len();
    }
    if pairs == 0 {
        return Err(Error::InvalidInput("loss over an empty batch".into()));
    }
    let inv = 1.0 / pairs as f64;
    let gather = |tape: &mut Tape, f: &dyn Fn(&InstanceTerms) -> Option<Var>| {
        let vars: Vec<Var> = per.iter().filter_map(f).collect();
        let s = tape.sum_scalars(&vars);
        tape.scale(s, inv)
    };
    let reprojection = gather(tape, &|t| Some(t.reprojection));
    let sparsity = gather(tape, &|t| Some(t.sparsity));
    let dictionary = gather(tape, &|t| Some(t.dictionary));
    let rotation = gather(tape, &|t| t.rotation);

    let mut terms = LossTerms {
        reprojection: tape.scalar(reprojection),
        sparsity: tape.scalar(sparsity),
        dictionary: tape.scalar(dictionary),
        rotation: tape.scalar(rotation),
        total: 0.0,
    };
    for (name, value) in [
        ("reprojection", terms.reprojection),
        ("sparsity", terms.sparsity),
        ("dictionary", terms.dictionary),
        ("rotation", terms.rotation),
    ] {
        if !value.is_finite() {
            return Err(Error::NumericalFailure {
                term: name.into(),
                value,
            });
        }
    }

    let mut parts = vec![reprojection];
    for (w, v) in [
        (weights.w_sparse, sparsity),
        (weights.w_dict, dictionary),
        (weights.beta, rotation),
    ] {
        if w != 0.0 {
            parts.push(tape.scale(v, w));
        }
    }
    let total = tape.sum_scalars(&parts);
    terms.total = tape.scalar(total);
    if !terms.total.is_finite() {
        return Err(Error::NumericalFailure {
            term: "total".into(),
            value: terms.total,
        });
    }
    Ok((total, terms))
}

/// Weighted training loss of a set of instances.
pub fn loss_total(instances: &[Vec<Keypoints2D>], theta: &DictionaryStack, weights: &LossWeights) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, theta);
    let refs: Vec<&[Keypoints2D]> = instances.iter().map(|v| v.as_slice()).collect();
    let (_, terms) = batch_loss(&mut tape, &vars, theta, &refs, weights, OnpMode::Differentiate)?;
    Ok(terms)
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    instances: &[&[Keypoints2D]],
    theta: &DictionaryStack,
    weights: &LossWeights,
    mode: OnpMode,
) -> Result<(LossTerms, ParamVector)> {
    let mut terms = LossTerms::default();
    let (_, g) = grad(theta, |tape, vars| {
        let (total, t) = batch_loss(tape, vars, theta, instances, weights, mode)?;
        terms = t;
        Ok(total)
    })?;
    Ok((terms, g))
}

/// Identity rotation in the RF head and zeros elsewhere in the bias.
pub fn identity_rf_bias(last_width: usize) -> DVector<f64> {
    let mut bias = DVector::zeros(9 + last_width);
    for i in [0, 4, 8] {
        bias[i] = 1.0;
    }
    bias
}
