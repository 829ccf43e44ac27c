use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Initial value of every layer threshold.
pub const INITIAL_LAMBDA: f64 = 0.01;

/// Learnable parameters of the shape prior.
///
/// `dictionaries[0]` is the `3P x B1` shape dictionary whose rows follow the
/// column-major vectorization of a `P x 3` shape (row `c * P + i` is
/// coordinate `c` of point `i`). Deeper dictionaries are `B(l-1) x B(l)`.
/// The encoder and decoder read the same matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryStack {
    num_points: usize,
    pub dictionaries: Vec<DMatrix<f64>>,
    pub lambdas: Vec<f64>,
    /// Rotation-factorization map, `(9 + B_L) x 6 B_L`.
    pub rf_weight: DMatrix<f64>,
    pub rf_bias: DVector<f64>,
}

impl DictionaryStack {
    /// Random initialization: zero-mean Gaussian entries with variance
    /// `2 / fan_in`, thresholds at [`INITIAL_LAMBDA`], zero RF bias.
    pub fn init<R: Rng + ?Sized>(num_points: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut stack = Self::zeros(num_points, widths)?;
        for d in stack.dictionaries.iter_mut() {
            fill_he(d, rng);
        }
        fill_he(&mut stack.rf_weight, rng);
        stack.lambdas.fill(INITIAL_LAMBDA);
        Ok(stack)
    }

    /// All-zero parameters (thresholds included).
    pub fn zeros(num_points: usize, widths: &[usize]) -> Result<Self> {
        validate_widths(num_points, widths)?;
        let mut dictionaries = Vec::with_capacity(widths.len());
        let mut rows = 3 * num_points;
        for &b in widths {
            dictionaries.push(DMatrix::zeros(rows, b));
            rows = b;
        }
        let last = *widths.last().expect("validated non-empty");
        Ok(Self {
            num_points,
            dictionaries,
            lambdas: vec![0.0; widths.len()],
            rf_weight: DMatrix::zeros(9 + last, 6 * last),
            rf_bias: DVector::zeros(9 + last),
        })
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_layers(&self) -> usize {
        self.dictionaries.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.dictionaries.iter().map(|d| d.ncols()).collect()
    }

    pub fn last_width(&self) -> usize {
        self.dictionaries.last().map_or(0, |d| d.ncols())
    }

    /// Checks every dimension and the threshold constraint.
    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        validate_widths(self.num_points, &widths)?;
        let mut rows = 3 * self.num_points;
        for (l, d) in self.dictionaries.iter().enumerate() {
            if d.nrows() != rows {
                return Err(Error::shape("dictionary rows", rows, format!("{} (layer {})", d.nrows(), l + 1)));
            }
            rows = d.ncols();
        }
        if self.lambdas.len() != widths.len() {
            return Err(Error::shape("thresholds", widths.len(), self.lambdas.len()));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(**l >= 0.0)) {
            return Err(Error::InvalidInput(format!("negative threshold {bad}")));
        }
        let last = self.last_width();
        if self.rf_weight.shape() != (9 + last, 6 * last) {
            return Err(Error::shape(
                "rf_weight",
                format!("{} x {}", 9 + last, 6 * last),
                format!("{} x {}", self.rf_weight.nrows(), self.rf_weight.ncols()),
            ));
        }
        if self.rf_bias.len() != 9 + last {
            return Err(Error::shape("rf_bias", 9 + last, self.rf_bias.len()));
        }
        Ok(())
    }

    /// Checks that this stack matches a requested architecture.
    pub fn ensure_architecture(&self, num_points: usize, widths: &[usize]) -> Result<()> {
        if self.num_points != num_points || self.widths() != widths {
            return Err(Error::ConfigMismatch(format!(
                "parameters have P = {} and widths {:?}, expected P = {} and widths {:?}",
                self.num_points,
                self.widths(),
                num_points,
                widths
            )));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.dictionaries.iter().map(|d| d.len()).sum::<usize>()
            + self.lambdas.len()
            + self.rf_weight.len()
            + self.rf_bias.len()
    }
}

fn validate_widths(num_points: usize, widths: &[usize]) -> Result<()> {
    if num_points == 0 {
        return Err(Error::InvalidInput("number of keypoints must be positive".into()));
    }
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::InvalidInput(format!("invalid layer widths {widths:?}")));
    }
    if widths.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput(format!(
            "layer widths must be strictly decreasing, got {widths:?}"
        )));
    }
    Ok(())
}

fn fill_he<R: Rng + ?Sized>(m: &mut DMatrix<f64>, rng: &mut R) {
    let fan_in = m.ncols().max(1) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    // Column-major fill order keeps initialization reproducible.
    for v in m.iter_mut() {
        *v = normal.sample(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_follow_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = DictionaryStack::init(20, &[128, 64, 32, 16, 8], &mut rng).unwrap();
        assert_eq!(s.dictionaries[0].shape(), (60, 128));
        assert_eq!(s.dictionaries[4].shape(), (16, 8));
        assert_eq!(s.rf_weight.shape(), (17, 48));
        assert!(s.lambdas.iter().all(|&l| l == INITIAL_LAMBDA));
        s.validate().unwrap();
    }

    #[test]
    fn rejects_non_decreasing_widths() {
        assert!(DictionaryStack::zeros(5, &[8, 8]).is_err());
        assert!(DictionaryStack::zeros(5, &[4, 8]).is_err());
        assert!(DictionaryStack::zeros(5, &[]).is_err());
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let s = DictionaryStack::zeros(6, &[8, 4]).unwrap();
        assert!(matches!(s.ensure_architecture(6, &[8, 2]), Err(Error::ConfigMismatch(_))));
        s.ensure_architecture(6, &[8, 4]).unwrap();
    }
}
