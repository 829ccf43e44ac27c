use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::neural_prior::DictionaryStack;

/// Architecture needed to map a flat parameter vector back to a stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub num_points: usize,
    pub widths: Vec<usize>,
}

impl ParamLayout {
    pub fn of(theta: &DictionaryStack) -> Self {
        Self {
            num_points: theta.num_points(),
            widths: theta.widths(),
        }
    }

    fn dictionary_shapes(&self) -> Vec<(usize, usize)> {
        let mut rows = 3 * self.num_points;
        self.widths
            .iter()
            .map(|&b| {
                let shape = (rows, b);
                rows = b;
                shape
            })
            .collect()
    }

    fn rf_shape(&self) -> (usize, usize) {
        let last = *self.widths.last().unwrap_or(&0);
        (9 + last, 6 * last)
    }

    /// Indices of the layer thresholds.
    pub fn lambda_range(&self) -> Range<usize> {
        let start: usize = self.dictionary_shapes().iter().map(|(r, c)| r * c).sum();
        start..start + self.widths.len()
    }

    /// Indices of the RF weights and bias.
    pub fn rf_range(&self) -> Range<usize> {
        let start = self.lambda_range().end;
        let (r, c) = self.rf_shape();
        start..start + r * c + r
    }

    pub fn len(&self) -> usize {
        self.rf_range().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat view over every learnable quantity, ordered as: dictionaries
/// (column-major, layer by layer), thresholds, RF weight (column-major), RF
/// bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
        }
    }

    pub fn flatten(theta: &DictionaryStack) -> Self {
        let mut values = Vec::with_capacity(theta.num_parameters());
        for d in &theta.dictionaries {
            values.extend_from_slice(d.as_slice());
        }
        values.extend_from_slice(&theta.lambdas);
        values.extend_from_slice(theta.rf_weight.as_slice());
        values.extend_from_slice(theta.rf_bias.as_slice());
        Self { values }
    }

    pub fn unflatten(&self, layout: &ParamLayout) -> Result<DictionaryStack> {
        if self.values.len() != layout.len() {
            return Err(Error::shape("ParamVector", layout.len(), self.values.len()));
        }
        let mut stack = DictionaryStack::zeros(layout.num_points, &layout.widths)?;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &self.values[at..at + n];
            at += n;
            s
        };
        for d in stack.dictionaries.iter_mut() {
            let (r, c) = d.shape();
            *d = DMatrix::from_column_slice(r, c, take(r * c));
        }
        let l = stack.lambdas.len();
        stack.lambdas.copy_from_slice(take(l));
        let (r, c) = stack.rf_weight.shape();
        stack.rf_weight = DMatrix::from_column_slice(r, c, take(r * c));
        stack.rf_bias = DVector::from_column_slice(take(r));
        Ok(stack)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &ParamVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.values.iter_mut() {
            *v *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
